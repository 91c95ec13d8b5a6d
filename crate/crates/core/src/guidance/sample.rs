use super::loss::{total_loss, Models};
use super::{init_prompt_state, GuidanceConfig, GuidanceTrace, PromptState, TraceRecord};
use crate::diffusion::{ddim_sample, SampleOutput, SamplerConfig, TextEmbedding};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::CaptionTokens;

/// `K` gradient steps on the suffix at one reverse step, then the
/// conditioning `E_text(P + S)` with the updated suffix.
pub fn opt_emb(
    z_t: &Tensor,
    t: usize,
    step: usize,
    state: &mut PromptState,
    cfg: &GuidanceConfig,
    models: &Models,
    trace: &mut GuidanceTrace,
) -> Result<TextEmbedding> {
    let model = models.diffusion;
    let uncond_eps = model.predict_eps(z_t, t, &model.null_embedding());
    for iter in 0..cfg.k_iters {
        let eval = total_loss(z_t, t, step, state, cfg, models, &uncond_eps)?;
        let grad_norm = eval.grad.data().iter().map(|g| g * g).sum::<f64>().sqrt();
        trace.records.push(TraceRecord {
            step,
            t,
            iter,
            l_disc: eval.l_disc,
            l_tv: eval.l_tv,
            reg: eval.reg,
            total: eval.total,
            cosine: state.cosine_per_token(),
            grad_norm,
            graph_bytes: eval.graph_bytes,
        });
        if !grad_norm.is_finite() || !eval.total.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite prompt gradient at step {step}, iteration {iter}; trace so far:\n{}",
                trace.to_json_lines()
            )));
        }
        let eta = cfg.eta;
        let next = state.suffix().zip_map(&eval.grad, |p, g| p - eta * g);
        state.set_suffix(next)?;
    }
    model.encode_text_with(state.tokens(), Some(state.suffix()))
}

#[derive(Clone, Debug)]
pub struct GuidedSample {
    pub output: SampleOutput,
    pub trace: GuidanceTrace,
    pub state: PromptState,
}

/// DDIM sampling that optimises the learnable tokens inside
/// `cfg.opt_range` and conditions on the bare prompt everywhere else.
pub fn sample_motionprompt(
    prompt: &CaptionTokens,
    seed: u64,
    cfg: &GuidanceConfig,
    scfg: &SamplerConfig,
    models: &Models,
) -> Result<GuidedSample> {
    cfg.validate(scfg.n_steps, scfg.n_frames)?;
    if models.cfg_scale != scfg.cfg_scale {
        return Err(Error::Config("guidance and sampler disagree on the CFG scale".into()));
    }
    if !models.discriminator.is_trained() {
        return Err(Error::InvalidArgument("guidance needs a trained discriminator".into()));
    }
    let model = models.diffusion;
    let mut state = init_prompt_state(model, prompt, cfg.n_tokens, &cfg.init_words)?;
    let plain = model.encode_text(&prompt.base())?;
    let mut trace = GuidanceTrace::default();
    let output = ddim_sample(model, models.schedule, scfg, seed, &mut |step, t, z| {
        if cfg.in_range(step) {
            opt_emb(z, t, step, &mut state, cfg, models, &mut trace)
        } else {
            Ok(plain.clone())
        }
    })?;
    Ok(GuidedSample { output, trace, state })
}
