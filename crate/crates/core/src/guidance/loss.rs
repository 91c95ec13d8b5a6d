use super::{GuidanceConfig, PromptState};
use crate::diffusion::{tweedie_graph, DiffusionModel, NoiseSchedule};
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::flow::{estimate_flow_graph, tv_loss_graph, FlowParams};
use crate::graph::{Graph, Var};
use crate::pairs::select_frame_pairs;
use crate::tensor::Tensor;

/// Frozen networks and settings shared by every guidance call.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub diffusion: &'a DiffusionModel,
    pub schedule: &'a NoiseSchedule,
    pub discriminator: &'a Discriminator,
    pub flow: &'a FlowParams,
    /// Classifier-free guidance scale `w`.
    pub cfg_scale: f64,
}

#[derive(Clone, Debug)]
pub struct LossEval {
    pub total: f64,
    pub l_disc: f64,
    pub l_tv: f64,
    pub reg: f64,
    /// Gradient of `total` with respect to the suffix `T`.
    pub grad: Tensor,
    /// Bytes held by forward values on the tape.
    pub graph_bytes: usize,
}

pub(crate) fn check_models(models: &Models, z_t: &Tensor) -> Result<()> {
    if !models.discriminator.is_trained() {
        return Err(Error::InvalidArgument("guidance needs a trained discriminator".into()));
    }
    let s = z_t.shape();
    let cfg = models.diffusion.config();
    if s.len() != 4 || s[1] != cfg.image_channels {
        return Err(Error::Shape(format!("latent must be [N, {}, H, W], got {s:?}", cfg.image_channels)));
    }
    Ok(())
}

/// Mean `log(1 - D(flow))` and mean flow TV over the selected pairs of the
/// decoded Tweedie estimate `z0_hat` (`[N, C, H', W']`). TV is taken per flow
/// element here so that it sits on the same scale as the discriminator term.
pub(crate) fn flow_terms(g: &mut Graph, z0_hat: Var, cfg: &GuidanceConfig, models: &Models) -> Result<(Var, Var)> {
    let n = g.shape(z0_hat)[0];
    let pairs = select_frame_pairs(n, cfg.n_decode_frames, cfg.pair_policy, cfg.pair_seed)?;
    let mut frames: Vec<usize> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    frames.sort_unstable();
    frames.dedup();

    let latents: Vec<Var> = frames.iter().map(|&i| g.outer(z0_hat, i)).collect();
    let stacked = g.stack(&latents);
    let decoded = models.diffusion.config().codec.build().decode_graph(g, stacked);
    let ds = g.shape(decoded).to_vec();
    let dcfg = models.discriminator.config();
    if (ds[2], ds[3]) != (dcfg.height, dcfg.width) {
        return Err(Error::Shape(format!(
            "decoded frames are {}x{} but the discriminator expects {}x{}",
            ds[2], ds[3], dcfg.height, dcfg.width
        )));
    }
    let pos = |i: usize| frames.iter().position(|&f| f == i).expect("frame was selected");

    let bound = models.discriminator.bind(g, false);
    let (mut disc, mut tv) = (Vec::new(), Vec::new());
    for &(a, b) in &pairs {
        let fa = g.outer(decoded, pos(a));
        let fb = g.outer(decoded, pos(b));
        let flow = estimate_flow_graph(g, fa, fb, models.flow);
        disc.push(models.discriminator.log_one_minus_graph(g, &bound, flow));
        let total = tv_loss_graph(g, flow);
        tv.push(g.scale(total, 1.0 / (2 * ds[2] * ds[3]) as f64));
    }
    let disc = g.stack(&disc);
    let tv = g.stack(&tv);
    Ok((g.mean(disc), g.mean(tv)))
}

/// `lambda1 * l_disc + lambda2 * l_tv + lambda3 * ||T - T0||^2` at reverse step
/// `step` (timestep `t`) and its gradient with respect to `T`. The
/// unconditional branch is a constant, `uncond_eps`.
pub fn total_loss(
    z_t: &Tensor,
    t: usize,
    step: usize,
    state: &PromptState,
    cfg: &GuidanceConfig,
    models: &Models,
    uncond_eps: &Tensor,
) -> Result<LossEval> {
    if !cfg.in_range(step) {
        return Err(Error::InvalidArgument(format!(
            "step {step} is outside the optimisation range [{}, {})",
            cfg.opt_range[0], cfg.opt_range[1]
        )));
    }
    check_models(models, z_t)?;
    if t == 0 {
        return Err(Error::InvalidArgument("cannot optimise at t = 0".into()));
    }
    let w = models.cfg_scale;
    let model = models.diffusion;

    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let suffix = g.leaf(state.suffix().clone(), true);
    let cond = model.encode_text_graph(&mut g, &bound, state.tokens(), Some(suffix))?;
    let z = g.constant(z_t.clone());
    let eps_c = model.eps_graph(&mut g, &bound, z, t, cond);
    let eps_u = g.constant(uncond_eps.map(|u| (1.0 - w) * u));
    let eps_c = g.scale(eps_c, w);
    let eps = g.add(eps_u, eps_c);
    let z0_hat = tweedie_graph(&mut g, z, t, eps, models.schedule);

    let (l_disc, l_tv) = flow_terms(&mut g, z0_hat, cfg, models)?;
    let t0 = g.constant(state.initial().clone());
    let drift = g.sub(suffix, t0);
    let drift = g.square(drift);
    let reg = g.sum(drift);

    let a = g.scale(l_disc, cfg.lambda1);
    let b = g.scale(l_tv, cfg.lambda2);
    let c = g.scale(reg, cfg.lambda3);
    let ab = g.add(a, b);
    let total = g.add(ab, c);

    let mut grads = g.backward(total);
    let scalar = |v: Var| g.value(v).data()[0];
    Ok(LossEval {
        total: scalar(total),
        l_disc: scalar(l_disc),
        l_tv: scalar(l_tv),
        reg: scalar(reg),
        grad: grads.take(suffix),
        graph_bytes: g.value_bytes(),
    })
}
