//! Horn–Schunck flow with a fixed, unrolled iteration count.
//!
//! Every step is a node in the autodiff [`Graph`], so the returned flow is a
//! differentiable function of both input frames.

use serde::{Deserialize, Serialize};

use super::FlowField;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Neighbourhood average used by the Jacobi update.
const HS_AVERAGE: [f64; 9] = [
    1. / 12.,
    1. / 6.,
    1. / 12.,
    1. / 6.,
    0.,
    1. / 6.,
    1. / 12.,
    1. / 6.,
    1. / 12.,
];
const DX: [f64; 9] = [0., 0., 0., -0.5, 0., 0.5, 0., 0., 0.];
const DY: [f64; 9] = [0., -0.5, 0., 0., 0., 0., 0., 0.5, 0.];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowParams {
    /// Weight `alpha` of the smoothness term; enters the update as `alpha^2`.
    pub smoothness_weight: f64,
    /// Jacobi iterations per warping pass.
    pub n_iterations: usize,
    /// Linearisation passes; each pass re-warps the second frame by the current flow.
    pub n_warps: usize,
    pub epsilon: f64,
    /// Gaussian pre-smoothing of the grayscale frames; 0 disables it.
    pub presmooth_sigma: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            smoothness_weight: 0.03,
            n_iterations: 80,
            n_warps: 3,
            epsilon: 1e-9,
            presmooth_sigma: 1.0,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.smoothness_weight > 0.0) || !(self.epsilon > 0.0) || self.n_iterations == 0 || self.n_warps == 0 {
            return Err(Error::InvalidArgument(
                "flow params need smoothness_weight > 0, epsilon > 0, n_iterations >= 1, n_warps >= 1".into(),
            ));
        }
        if !(self.presmooth_sigma >= 0.0) {
            return Err(Error::InvalidArgument("presmooth_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// A flow estimator usable inside a differentiable pipeline.
pub trait FlowEstimator {
    /// `frame_a`, `frame_b` are `[C, H, W]` nodes; returns a `[2, H, W]` node.
    fn estimate_graph(&self, g: &mut Graph, frame_a: Var, frame_b: Var) -> Var;
}

#[derive(Clone, Debug, Default)]
pub struct HornSchunck {
    pub params: FlowParams,
}

impl HornSchunck {
    pub fn new(params: FlowParams) -> Self {
        Self { params }
    }
}

impl FlowEstimator for HornSchunck {
    fn estimate_graph(&self, g: &mut Graph, frame_a: Var, frame_b: Var) -> Var {
        estimate_flow_graph(g, frame_a, frame_b, &self.params)
    }
}

fn gaussian_kernel(sigma: f64) -> (Vec<f64>, usize) {
    let radius = (2.0 * sigma).ceil() as usize;
    let size = 2 * radius + 1;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let norm: f64 = taps.iter().sum();
    let mut kernel = vec![0.0; size * size];
    for a in 0..size {
        for b in 0..size {
            kernel[a * size + b] = taps[a] * taps[b] / (norm * norm);
        }
    }
    (kernel, size)
}

fn grayscale(g: &mut Graph, frame: Var) -> Var {
    let channels = g.shape(frame)[0];
    if channels == 3 {
        g.channel_mix(frame, &LUMA)
    } else {
        let w = vec![1.0 / channels as f64; channels];
        g.channel_mix(frame, &w)
    }
}

fn smooth(g: &mut Graph, x: Var, sigma: f64) -> Var {
    if sigma > 0.0 {
        let (k, size) = gaussian_kernel(sigma);
        g.stencil(x, &k, size)
    } else {
        x
    }
}

/// Differentiable flow mapping `frame_a` toward `frame_b`, so that
/// `frame_a(x) ≈ frame_b(x + flow(x))`.
pub fn estimate_flow_graph(g: &mut Graph, frame_a: Var, frame_b: Var, params: &FlowParams) -> Var {
    let shape = g.shape(frame_a).to_vec();
    assert_eq!(shape, g.shape(frame_b), "estimate_flow_graph: frame shapes differ");
    let (h, w) = (shape[1], shape[2]);

    let gray_a = grayscale(g, frame_a);
    let gray_b = grayscale(g, frame_b);
    let ga = smooth(g, gray_a, params.presmooth_sigma);
    let gb = smooth(g, gray_b, params.presmooth_sigma);
    let gb_planes = g.reshape(gb, &[1, h, w]);
    let alpha2 = params.smoothness_weight * params.smoothness_weight + params.epsilon;

    let mut u = g.constant(Tensor::zeros(&[h, w]));
    let mut v = g.constant(Tensor::zeros(&[h, w]));
    for pass in 0..params.n_warps {
        // Linearise around the current estimate (u0, v0).
        let warped = if pass == 0 {
            gb
        } else {
            let flow = g.stack(&[u, v]);
            let wb = g.warp(gb_planes, flow);
            g.reshape(wb, &[h, w])
        };
        let sum = g.add(ga, warped);
        let mid = g.scale(sum, 0.5);
        let mut ix = g.stencil(mid, &DX, 3);
        let mut iy = g.stencil(mid, &DY, 3);
        let mut it = g.sub(warped, ga);
        if pass > 0 {
            // Drop the data term where the warp samples outside the frame;
            // the smoothness term fills those pixels in.
            let mask = g.constant(inside_mask(g.value(u), g.value(v)));
            ix = g.mul(ix, mask);
            iy = g.mul(iy, mask);
            it = g.mul(it, mask);
        }
        let ix2 = g.square(ix);
        let iy2 = g.square(iy);
        let grad2 = g.add(ix2, iy2);
        let denom = g.offset(grad2, alpha2);
        // Residual offset: It - Ix u0 - Iy v0.
        let xu = g.mul(ix, u);
        let yv = g.mul(iy, v);
        let lin = g.add(xu, yv);
        let c0 = g.sub(it, lin);

        for _ in 0..params.n_iterations {
            let ubar = g.stencil(u, &HS_AVERAGE, 3);
            let vbar = g.stencil(v, &HS_AVERAGE, 3);
            let a = g.mul(ix, ubar);
            let b = g.mul(iy, vbar);
            let ab = g.add(a, b);
            let num = g.add(ab, c0);
            let ratio = g.div(num, denom);
            let du = g.mul(ix, ratio);
            let dv = g.mul(iy, ratio);
            u = g.sub(ubar, du);
            v = g.sub(vbar, dv);
        }
    }
    g.stack(&[u, v])
}

fn inside_mask(u: &Tensor, v: &Tensor) -> Tensor {
    let (h, w) = (u.shape()[0], u.shape()[1]);
    let data = (0..h * w)
        .map(|p| {
            let x = (p % w) as f64 + u.data()[p];
            let y = (p / w) as f64 + v.data()[p];
            let inside = (0.0..=(w - 1) as f64).contains(&x) && (0.0..=(h - 1) as f64).contains(&y);
            if inside { 1.0 } else { 0.0 }
        })
        .collect();
    Tensor::from_parts(&[h, w], data)
}

fn check_frame(t: &Tensor, name: &str) -> Result<()> {
    if t.shape().len() != 3 {
        return Err(Error::Shape(format!("{name} must be [C, H, W], got {:?}", t.shape())));
    }
    if !t.all_finite() {
        return Err(Error::NonFinite(name.into()));
    }
    Ok(())
}

/// Flow between two `[C, H, W]` frames.
pub fn estimate_flow(frame_a: &Tensor, frame_b: &Tensor, params: &FlowParams) -> Result<FlowField> {
    check_frame(frame_a, "frame_a")?;
    check_frame(frame_b, "frame_b")?;
    if frame_a.shape() != frame_b.shape() {
        return Err(Error::Shape(format!(
            "frames differ: {:?} vs {:?}",
            frame_a.shape(),
            frame_b.shape()
        )));
    }
    params.validate()?;
    let mut g = Graph::new();
    let a = g.constant(frame_a.clone());
    let b = g.constant(frame_b.clone());
    let f = estimate_flow_graph(&mut g, a, b, params);
    FlowField::new(g.value(f).clone())
}
