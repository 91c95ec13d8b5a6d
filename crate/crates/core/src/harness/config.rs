//! Run configuration: one TOML document with a section per stage.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::diffusion::{DenoiserConfig, SamplerConfig, ScheduleConfig, TrainConfig};
use crate::discriminator::{DiscTrainConfig, DiscriminatorConfig, PairSpec};
use crate::error::{Error, Result};
use crate::flow::FlowParams;
use crate::guidance::GuidanceConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunSection {
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub n_clips: usize,
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            n_clips: 500,
            n_frames: 8,
            height: 32,
            width: 32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FakeSource {
    /// The denoiser checkpoint saved after `early_epoch`.
    Early,
    /// The final denoiser, the one guidance later samples from.
    Final,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSection {
    pub schedule: ScheduleConfig,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    /// Epoch whose weights are kept as the early checkpoint.
    pub early_epoch: usize,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            model: DenoiserConfig::default(),
            train: TrainConfig::default(),
            early_epoch: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    /// Real clips drawn from the front of the dataset.
    pub n_real_clips: usize,
    /// Generated clips, one per (caption, seed); captions cycle through the dataset.
    pub n_fake_clips: usize,
    pub fake_source: FakeSource,
    pub pairs: PairSpec,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            n_real_clips: 500,
            n_fake_clips: 500,
            fake_source: FakeSource::Early,
            pairs: PairSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct DiscriminatorSection {
    pub model: DiscriminatorConfig,
    pub train: DiscTrainConfig,
}


#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Baseline,
    MotionPrompt,
    Dps,
}

impl SampleMode {
    pub fn name(self) -> &'static str {
        match self {
            SampleMode::Baseline => "baseline",
            SampleMode::MotionPrompt => "motionprompt",
            SampleMode::Dps => "dps",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Prompts come from freshly drawn motion specs, independent of the training set.
    pub n_prompts: usize,
    pub seeds_per_prompt: usize,
    /// Modes sampled for every (prompt, seed); the first is the reference for paired deltas.
    pub modes: Vec<SampleMode>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n_prompts: 10,
            seeds_per_prompt: 2,
            modes: vec![SampleMode::Baseline, SampleMode::MotionPrompt],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub run: RunSection,
    pub data: DataSection,
    pub diffusion: DiffusionSection,
    pub sampler: SamplerConfig,
    pub flow: FlowParams,
    pub corpus: CorpusSection,
    pub discriminator: DiscriminatorSection,
    pub guidance: GuidanceConfig,
    pub eval: EvalSection,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Every value written out, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.n_clips == 0 || d.n_frames < 2 || d.height == 0 || d.width == 0 {
            return Err(Error::Config("data needs n_clips >= 1, n_frames >= 2 and a nonzero size".into()));
        }
        let s = &self.sampler;
        if (s.n_frames, s.height, s.width) != (d.n_frames, d.height, d.width) {
            return Err(Error::Config("sampler frame count and size must match the data section".into()));
        }
        let m = &self.discriminator.model;
        if (m.height, m.width) != (d.height, d.width) {
            return Err(Error::Config("discriminator size must match the data section".into()));
        }
        if self.diffusion.early_epoch == 0 || self.diffusion.early_epoch > self.diffusion.train.epochs {
            return Err(Error::Config("early_epoch must be in 1..=train.epochs".into()));
        }
        if self.corpus.n_real_clips == 0 || self.corpus.n_real_clips > d.n_clips || self.corpus.n_fake_clips == 0 {
            return Err(Error::Config("corpus needs 1..=n_clips real clips and at least one fake clip".into()));
        }
        let pairs = self.corpus.pairs.pairs_per_clip;
        if pairs == 0 || 2 * pairs > d.n_frames {
            return Err(Error::Config(format!(
                "corpus.pairs.pairs_per_clip must be in 1..={} for {}-frame clips",
                d.n_frames / 2,
                d.n_frames
            )));
        }
        if self.eval.modes.is_empty() || self.eval.n_prompts == 0 || self.eval.seeds_per_prompt == 0 {
            return Err(Error::Config("eval needs at least one mode, prompt and seed".into()));
        }
        if self.eval.modes.contains(&SampleMode::Dps) && self.guidance.dps_gamma.is_none() {
            return Err(Error::Config("dps mode needs guidance.dps_gamma".into()));
        }
        self.flow.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.guidance.validate(s.n_steps, s.n_frames)?;
        Ok(())
    }
}

/// Stable digest of any serialisable value and the keys of upstream stages.
pub fn section_hash<T: Serialize>(value: &T, upstream: &[&str]) -> String {
    let mut text = toml::to_string(&Wrapper { value }).expect("section serialises");
    for u in upstream {
        text.push('\n');
        text.push_str(u);
    }
    sha256_hex(text.as_bytes())[..16].to_string()
}

#[derive(Serialize)]
struct Wrapper<'a, T: Serialize> {
    value: &'a T,
}
