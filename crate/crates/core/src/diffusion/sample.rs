use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{DiffusionModel, TextEmbedding};
use super::schedule::{ddim_step, NoiseSchedule};
use super::train::gaussian;
use crate::checkpoint::tensor_hash;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::video::VideoClip;
use crate::vocab::CaptionTokens;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub n_steps: usize,
    /// Classifier-free guidance scale `w`.
    pub cfg_scale: f64,
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 50,
            cfg_scale: 7.5,
            n_frames: 8,
            height: 32,
            width: 32,
        }
    }
}

impl SamplerConfig {
    pub fn latent_shape(&self, model: &DiffusionModel) -> Vec<usize> {
        let pixel = [self.n_frames, model.config().image_channels, self.height, self.width];
        model.config().codec.build().latent_shape(&pixel)
    }
}

/// `z_T` for a seed; every sampling mode draws it the same way.
pub fn initial_noise(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gaussian(&mut rng, shape)
}

/// `eps_u + w (eps_c - eps_u)`, evaluated as `(1 - w) eps_u + w eps_c` so that
/// `w = 0` and `w = 1` return the branches exactly.
pub fn cfg_combine(cond: &Tensor, uncond: &Tensor, w: f64) -> Tensor {
    uncond.zip_map(cond, |u, c| (1.0 - w) * u + w * c)
}

pub fn cfg_predict(
    model: &DiffusionModel,
    z_t: &Tensor,
    t: usize,
    cond: &TextEmbedding,
    uncond: &TextEmbedding,
    w: f64,
) -> Tensor {
    let ec = model.predict_eps(z_t, t, cond);
    let eu = model.predict_eps(z_t, t, uncond);
    cfg_combine(&ec, &eu, w)
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub clip: VideoClip,
    pub latent: Tensor,
    pub noise_hash: String,
    /// Hash of the conditioning matrix used at each reverse step.
    pub cond_hashes: Vec<String>,
}

/// Decodes a clean latent and clamps it into a clip.
pub fn decode_clip(model: &DiffusionModel, z0: &Tensor) -> Result<VideoClip> {
    VideoClip::from_clamped(model.config().codec.build().decode(z0))
}

pub fn check_finite(z: &Tensor, step: usize) -> Result<()> {
    if !z.all_finite() {
        return Err(Error::Numerical(format!("non-finite latent at reverse step {step}")));
    }
    Ok(())
}

/// The DDIM reverse loop with CFG; `cond_for_step(step, t, z_t)` supplies the
/// conditioning at each of the `n_steps` steps (step 0 starts from noise).
pub fn ddim_sample(
    model: &DiffusionModel,
    schedule: &NoiseSchedule,
    scfg: &SamplerConfig,
    seed: u64,
    cond_for_step: &mut dyn FnMut(usize, usize, &Tensor) -> Result<TextEmbedding>,
) -> Result<SampleOutput> {
    let grid = schedule.ddim_timesteps(scfg.n_steps)?;
    let mut z = initial_noise(seed, &scfg.latent_shape(model));
    let noise_hash = tensor_hash(&z);
    let uncond = model.null_embedding();
    let mut cond_hashes = Vec::with_capacity(grid.len());
    for (step, &t) in grid.iter().enumerate() {
        let t_prev = grid.get(step + 1).copied().unwrap_or(0);
        let cond = cond_for_step(step, t, &z)?;
        cond_hashes.push(tensor_hash(&cond.matrix));
        let eps = cfg_predict(model, &z, t, &cond, &uncond, scfg.cfg_scale);
        z = ddim_step(&z, t, t_prev, &eps, schedule)?;
        check_finite(&z, step)?;
    }
    Ok(SampleOutput {
        clip: decode_clip(model, &z)?,
        latent: z,
        noise_hash,
        cond_hashes,
    })
}

/// Plain text-conditioned sampling.
pub fn sample_baseline(
    model: &DiffusionModel,
    schedule: &NoiseSchedule,
    scfg: &SamplerConfig,
    prompt: &CaptionTokens,
    seed: u64,
) -> Result<SampleOutput> {
    let cond = model.encode_text(prompt)?;
    ddim_sample(model, schedule, scfg, seed, &mut |_, _, _| Ok(cond.clone()))
}
