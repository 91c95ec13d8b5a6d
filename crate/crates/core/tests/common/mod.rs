//! Miniature untrained models for tests that only need the plumbing.
#![allow(dead_code)]

use flowprompt::diffusion::{DenoiserConfig, DiffusionModel, NoiseSchedule, SamplerConfig, ScheduleConfig};
use flowprompt::discriminator::{Discriminator, DiscriminatorConfig};
use flowprompt::flow::FlowParams;
use flowprompt::guidance::{GuidanceConfig, Models};
use flowprompt::harness::config::Config;
use flowprompt::Tensor;

pub struct Mini {
    pub model: DiffusionModel,
    pub schedule: NoiseSchedule,
    pub disc: Discriminator,
    pub flow: FlowParams,
    pub sampler: SamplerConfig,
}

impl Mini {
    /// `size x size` frames, `n_frames` of them, ten reverse steps.
    pub fn new(size: usize, n_frames: usize, seed: u64) -> Self {
        let model = DiffusionModel::new(
            DenoiserConfig {
                channels: 4,
                text_width: 8,
                time_width: 8,
                cond_width: 16,
                ..DenoiserConfig::default()
            },
            seed,
        )
        .unwrap();
        let mut disc = Discriminator::new(
            DiscriminatorConfig {
                channels: [4, 4, 8, 8],
                hidden: [8, 8],
                height: size,
                width: size,
                ..DiscriminatorConfig::default()
            },
            seed + 1,
        )
        .unwrap();
        disc.set_trained(true);
        Self {
            model,
            schedule: ScheduleConfig::default().build().unwrap(),
            disc,
            flow: FlowParams {
                n_iterations: 20,
                n_warps: 2,
                ..FlowParams::default()
            },
            sampler: SamplerConfig {
                n_steps: 10,
                n_frames,
                height: size,
                width: size,
                ..SamplerConfig::default()
            },
        }
    }

    pub fn models(&self) -> Models<'_> {
        Models {
            diffusion: &self.model,
            schedule: &self.schedule,
            discriminator: &self.disc,
            flow: &self.flow,
            cfg_scale: self.sampler.cfg_scale,
        }
    }

    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            opt_range: [2, 6],
            ..GuidanceConfig::default()
        }
    }
}

pub fn max_rel_diff(a: &Tensor, b: &Tensor) -> f64 {
    let scale = b.max_abs().max(1e-300);
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// A full pipeline small enough to run in well under a minute.
pub fn tiny_config() -> Config {
    Config::from_toml(
        r#"
[data]
n_clips = 16
n_frames = 4
height = 16
width = 16

[diffusion.model]
channels = 4
text_width = 8
time_width = 8
cond_width = 16

[diffusion.train]
epochs = 1

[diffusion]
early_epoch = 1

[sampler]
n_steps = 8
n_frames = 4
height = 16
width = 16

[flow]
n_iterations = 20
n_warps = 2

[corpus]
n_real_clips = 6
n_fake_clips = 4

[corpus.pairs]
pairs_per_clip = 2

[discriminator.model]
channels = [4, 4, 8, 8]
hidden = [8, 8]
height = 16
width = 16

[discriminator.train]
epochs = 2

[guidance]
"opt range" = [2, 5]
dps_gamma = 0.001

[eval]
n_prompts = 2
seeds_per_prompt = 1
modes = ["baseline", "motionprompt", "dps"]
"#,
    )
    .unwrap()
}
