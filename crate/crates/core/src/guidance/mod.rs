//! Test-time optimisation of learnable prompt tokens against a flow
//! discriminator, plus a latent-gradient (DPS) comparison sampler.

pub mod dps;
pub mod loss;
pub mod sample;

use serde::{Deserialize, Serialize};

pub use dps::{dps_latent_step, sample_dps, DpsStep};
pub use loss::{total_loss, LossEval, Models};
pub use sample::{opt_emb, sample_motionprompt, GuidedSample};

use crate::diffusion::DiffusionModel;
use crate::error::{Error, Result};
use crate::pairs::PairPolicy;
use crate::tensor::Tensor;
use crate::vocab::{self, CaptionTokens, MAX_SLOTS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Number of learnable tokens appended to the prompt.
        pub n_tokens: usize,
    /// Words whose embeddings initialise the tokens, cycled when shorter.
    pub init_words: Vec<String>,
    #[serde(rename = "λ1", alias = "lambda1")]
    pub lambda1: f64,
    #[serde(rename = "λ2", alias = "lambda2")]
    pub lambda2: f64,
    #[serde(rename = "λ3", alias = "lambda3")]
    pub lambda3: f64,
    #[serde(rename = "η", alias = "eta")]
    pub eta: f64,
    /// Gradient steps on the tokens per optimised reverse step.
    #[serde(rename = "K", alias = "k_iters")]
    pub k_iters: usize,
    /// Half-open range `[start, end)` of reverse-step indices that are optimised.
    #[serde(rename = "opt range", alias = "opt_range")]
    pub opt_range: [usize; 2],
    /// Frames decoded per loss evaluation; they form `n_decode_frames / 2` pairs.
    #[serde(rename = "# of frames", alias = "n_decode_frames")]
    pub n_decode_frames: usize,
    pub pair_policy: PairPolicy,
    pub pair_seed: u64,
    /// Step size of the latent-gradient sampler; `None` disables it.
    pub dps_gamma: Option<f64>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            n_tokens: 1,
            init_words: vec!["authentic".into(), "real".into()],
            lambda1: 1.0,
            lambda2: 5.0,
            lambda3: 10.0,
            eta: 5e-5,
            k_iters: 3,
            opt_range: [3, 15],
            n_decode_frames: 2,
            pair_policy: PairPolicy::Adjacent,
            pair_seed: 0,
            dps_gamma: None,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, n_steps: usize, n_frames: usize) -> Result<()> {
        if self.n_tokens == 0 || self.n_tokens > MAX_SLOTS {
            return Err(Error::Config(format!("n_tokens must be in 1..={MAX_SLOTS}")));
        }
        if self.init_words.is_empty() {
            return Err(Error::Config("init_words must not be empty".into()));
        }
        for w in &self.init_words {
            vocab::id_of(w)?;
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::Config(format!("eta must be > 0, got {}", self.eta)));
        }
        let [lo, hi] = self.opt_range;
        if lo > hi || hi > n_steps {
            return Err(Error::Config(format!(
                "opt_range [{lo}, {hi}) must lie within [0, {n_steps}]"
            )));
        }
        if self.n_decode_frames < 2 || !self.n_decode_frames.is_multiple_of(2) || self.n_decode_frames > n_frames {
            return Err(Error::Config(format!(
                "n_decode_frames must be even and in 2..={n_frames}, got {}",
                self.n_decode_frames
            )));
        }
        if let Some(gamma) = self.dps_gamma {
            if !(gamma >= 0.0) || !gamma.is_finite() {
                return Err(Error::Config(format!("dps_gamma must be >= 0, got {gamma}")));
            }
        }
        Ok(())
    }

    pub fn in_range(&self, step: usize) -> bool {
        (self.opt_range[0]..self.opt_range[1]).contains(&step)
    }
}

/// Learnable suffix `T` for a prompt, with its frozen initial value `T0`.
#[derive(Clone, Debug)]
pub struct PromptState {
    base: CaptionTokens,
    tokens: CaptionTokens,
    t: Tensor,
    t0: Tensor,
}

impl PromptState {
    /// Base caption `P`.
    pub fn base(&self) -> &CaptionTokens {
        &self.base
    }

    /// `P + S`.
    pub fn tokens(&self) -> &CaptionTokens {
        &self.tokens
    }

    pub fn n_tokens(&self) -> usize {
        self.t.shape()[0]
    }

    pub fn suffix(&self) -> &Tensor {
        &self.t
    }

    pub fn initial(&self) -> &Tensor {
        &self.t0
    }

    pub fn set_suffix(&mut self, t: Tensor) -> Result<()> {
        if t.shape() != self.t0.shape() {
            return Err(Error::Shape(format!(
                "suffix must be {:?}, got {:?}",
                self.t0.shape(),
                t.shape()
            )));
        }
        self.t = t;
        Ok(())
    }

    /// Cosine similarity of each token with its initial value.
    pub fn cosine_per_token(&self) -> Vec<f64> {
        let d = self.t.shape()[1];
        self.t
            .data()
            .chunks(d)
            .zip(self.t0.data().chunks(d))
            .map(|(a, b)| cosine(a, b))
            .collect()
    }

    /// `||T - T0||^2`.
    pub fn drift_sq(&self) -> f64 {
        self.t.data().iter().zip(self.t0.data()).map(|(a, b)| (a - b) * (a - b)).sum()
    }
}

/// Cosine similarity, exactly 1 for identical nonzero vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

/// Appends `n_tokens` slots to `prompt` and initialises each from the
/// embedding of an init word, cycling through `init_words`.
pub fn init_prompt_state(
    model: &DiffusionModel,
    prompt: &CaptionTokens,
    n_tokens: usize,
    init_words: &[String],
) -> Result<PromptState> {
    if n_tokens == 0 {
        return Err(Error::InvalidArgument("need at least one learnable token".into()));
    }
    if init_words.is_empty() {
        return Err(Error::InvalidArgument("init_words is empty".into()));
    }
    let base = prompt.base();
    if base.is_empty() || base.is_null() {
        return Err(Error::InvalidArgument("prompt must contain at least one word".into()));
    }
    let tokens = base.with_slots(n_tokens)?;
    if base.len() + n_tokens > model.config().max_tokens {
        return Err(Error::InvalidArgument(format!(
            "prompt of {} tokens plus {n_tokens} learnable tokens exceeds {}",
            base.len(),
            model.config().max_tokens
        )));
    }
    let ids = init_words.iter().map(|w| vocab::id_of(w)).collect::<Result<Vec<_>>>()?;
    let d = model.config().text_width;
    let mut data = Vec::with_capacity(n_tokens * d);
    for k in 0..n_tokens {
        data.extend_from_slice(model.token_row(ids[k % ids.len()]).data());
    }
    let t0 = Tensor::from_parts(&[n_tokens, d], data);
    Ok(PromptState {
        base,
        tokens,
        t: t0.clone(),
        t0,
    })
}

/// One inner iteration of prompt optimisation, measured before its update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub t: usize,
    pub iter: usize,
    pub l_disc: f64,
    pub l_tv: f64,
    pub reg: f64,
    pub total: f64,
    pub cosine: Vec<f64>,
    pub grad_norm: f64,
    pub graph_bytes: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GuidanceTrace {
    pub records: Vec<TraceRecord>,
}

impl GuidanceTrace {
    /// Token-averaged cosine with `T0` at the start of each optimised step.
    pub fn cosine_curve(&self) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter(|r| r.iter == 0)
            .map(|r| (r.step, r.cosine.iter().sum::<f64>() / r.cosine.len().max(1) as f64))
            .collect()
    }

    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("trace record serialises"));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::DenoiserConfig;

    #[test]
    fn init_state_cycles_words() {
        let m = DiffusionModel::new(DenoiserConfig::default(), 1).unwrap();
        let p = CaptionTokens::parse("red circle").unwrap();
        let words = vec!["authentic".to_string(), "real".to_string()];
        let s = init_prompt_state(&m, &p, 3, &words).unwrap();
        assert_eq!(s.tokens().n_slots(), 3);
        assert_eq!(s.suffix().shape(), [3, m.config().text_width]);
        let d = m.config().text_width;
        let a = m.token_row(vocab::id_of("authentic").unwrap());
        assert_eq!(&s.suffix().data()[2 * d..], a.data());
        assert!(s.cosine_per_token().iter().all(|&c| c == 1.0));
        assert_eq!(s.drift_sq(), 0.0);
        assert!(init_prompt_state(&m, &CaptionTokens::null(), 1, &words).is_err());
    }

    #[test]
    fn config_rejects_bad_ranges() {
        let c = GuidanceConfig::default();
        c.validate(50, 8).unwrap();
        let bad = GuidanceConfig { opt_range: [10, 60], ..c.clone() };
        assert!(bad.validate(50, 8).is_err());
        let bad = GuidanceConfig { n_decode_frames: 3, ..c.clone() };
        assert!(bad.validate(50, 8).is_err());
        let bad = GuidanceConfig { lambda2: -1.0, ..c };
        assert!(bad.validate(50, 8).is_err());
    }

    #[test]
    fn config_accepts_symbolic_keys() {
        let c: GuidanceConfig = toml::from_str(
            "\"λ1\" = 2.0\n\"η\" = 0.01\nK = 5\n\"opt range\" = [1, 4]\n\"# of frames\" = 4\n",
        )
        .unwrap();
        assert_eq!((c.lambda1, c.eta, c.k_iters, c.opt_range, c.n_decode_frames), (2.0, 0.01, 5, [1, 4], 4));
        assert!(toml::from_str::<GuidanceConfig>("lambda9 = 1.0").is_err());
        let ascii: GuidanceConfig = toml::from_str("lambda2 = 3.0\nk_iters = 2\nopt_range = [0, 2]").unwrap();
        assert_eq!((ascii.lambda2, ascii.k_iters, ascii.opt_range), (3.0, 2, [0, 2]));
        let text = toml::to_string(&GuidanceConfig::default()).unwrap();
        assert!(text.contains("\"λ3\"") && text.contains("\"# of frames\""));
        assert_eq!(toml::from_str::<GuidanceConfig>(&text).unwrap(), GuidanceConfig::default());
    }
}
