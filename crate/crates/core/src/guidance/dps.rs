use super::loss::{check_models, flow_terms, Models};
use super::GuidanceConfig;
use crate::checkpoint::tensor_hash;
use crate::diffusion::{
    cfg_predict, check_finite, ddim_step, decode_clip, forward_noise, initial_noise, tweedie_graph, SampleOutput,
    SamplerConfig, TextEmbedding,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;
use crate::vocab::CaptionTokens;

#[derive(Clone, Debug)]
pub struct DpsStep {
    pub z_prev: Tensor,
    /// `lambda1 * l_disc + lambda2 * l_tv` at the Tweedie estimate.
    pub loss: f64,
    /// Gradient of `loss` with respect to `z_t`.
    pub grad: Tensor,
    pub graph_bytes: usize,
}

/// One reverse step that nudges the Tweedie estimate down the latent
/// gradient of the flow loss: `z0 <- z0_hat - gamma * grad`, then re-noises
/// with the same noise prediction as plain DDIM.
#[allow(clippy::too_many_arguments)]
pub fn dps_latent_step(
    z_t: &Tensor,
    t: usize,
    t_prev: usize,
    gamma: f64,
    cond: &TextEmbedding,
    uncond: &TextEmbedding,
    cfg: &GuidanceConfig,
    models: &Models,
) -> Result<DpsStep> {
    check_models(models, z_t)?;
    if t == 0 || t_prev >= t {
        return Err(Error::InvalidArgument(format!("need 0 <= t_prev < t, got {t_prev}, {t}")));
    }
    let w = models.cfg_scale;
    let model = models.diffusion;
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let z = g.leaf(z_t.clone(), true);
    let c = g.constant(cond.matrix.clone());
    let u = g.constant(uncond.matrix.clone());
    let eps_c = model.eps_graph(&mut g, &bound, z, t, c);
    let eps_u = model.eps_graph(&mut g, &bound, z, t, u);
    let eps_u = g.scale(eps_u, 1.0 - w);
    let eps_c = g.scale(eps_c, w);
    let eps = g.add(eps_u, eps_c);
    let z0_hat = tweedie_graph(&mut g, z, t, eps, models.schedule);
    let (l_disc, l_tv) = flow_terms(&mut g, z0_hat, cfg, models)?;
    let a = g.scale(l_disc, cfg.lambda1);
    let b = g.scale(l_tv, cfg.lambda2);
    let loss = g.add(a, b);
    let mut grads = g.backward(loss);
    let grad = grads.take(z);
    if !grad.all_finite() {
        return Err(Error::Numerical(format!("non-finite latent gradient at t = {t}")));
    }
    let guided = g.value(z0_hat).zip_map(&grad, |x, d| x - gamma * d);
    let z_prev = forward_noise(&guided, t_prev, g.value(eps), models.schedule)?;
    Ok(DpsStep {
        z_prev,
        loss: g.value(loss).data()[0],
        grad,
        graph_bytes: g.value_bytes(),
    })
}

/// DDIM with latent-gradient steps inside `cfg.opt_range`; needs `cfg.dps_gamma`.
pub fn sample_dps(
    prompt: &CaptionTokens,
    seed: u64,
    cfg: &GuidanceConfig,
    scfg: &SamplerConfig,
    models: &Models,
) -> Result<(SampleOutput, Vec<DpsStep>)> {
    cfg.validate(scfg.n_steps, scfg.n_frames)?;
    let gamma = cfg
        .dps_gamma
        .ok_or_else(|| Error::Config("the latent-gradient sampler needs dps_gamma".into()))?;
    let model = models.diffusion;
    let grid = models.schedule.ddim_timesteps(scfg.n_steps)?;
    let mut z = initial_noise(seed, &scfg.latent_shape(model));
    let noise_hash = tensor_hash(&z);
    let cond = model.encode_text(&prompt.base())?;
    let uncond = model.null_embedding();
    let mut steps = Vec::new();
    for (step, &t) in grid.iter().enumerate() {
        let t_prev = grid.get(step + 1).copied().unwrap_or(0);
        z = if cfg.in_range(step) {
            let s = dps_latent_step(&z, t, t_prev, gamma, &cond, &uncond, cfg, models)?;
            let next = s.z_prev.clone();
            steps.push(s);
            next
        } else {
            let eps = cfg_predict(model, &z, t, &cond, &uncond, models.cfg_scale);
            ddim_step(&z, t, t_prev, &eps, models.schedule)?
        };
        check_finite(&z, step)?;
    }
    let cond_hash = tensor_hash(&cond.matrix);
    Ok((
        SampleOutput {
            clip: decode_clip(model, &z)?,
            latent: z,
            noise_hash,
            cond_hashes: vec![cond_hash; grid.len()],
        },
        steps,
    ))
}
