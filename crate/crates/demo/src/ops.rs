//! Plain Rust operations behind the browser bindings.

use flowprompt::diffusion::{forward_noise, initial_noise, make_schedule, NoiseSchedule};
use flowprompt::flow::{estimate_flow, flow_to_rgb, tv_loss, FlowField, FlowParams};
use flowprompt::synth::{caption_of, make_clip, Background, MotionSpec, ShapeKind, PALETTE};
use flowprompt::video::VideoClip;
use flowprompt::{Error, Result, Tensor};

pub const SIZE: usize = 32;
pub const N_FRAMES: usize = 8;
const SHAPE_PX: u32 = 10;

pub fn parse_shape(name: &str) -> Result<ShapeKind> {
    ShapeKind::ALL
        .into_iter()
        .find(|s| s.word() == name)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown shape {name:?}")))
}

pub fn parse_color(name: &str) -> Result<[f64; 3]> {
    PALETTE
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, c)| *c)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown color {name:?}")))
}

/// A rendered clip with its ground-truth flows.
pub struct Scene {
    pub clip: VideoClip,
    pub truth: Vec<FlowField>,
    pub caption: String,
}

impl Scene {
    /// The trajectory is centred in the frame, so any velocity within the
    /// synthesiser's speed limit fits.
    pub fn new(shape: &str, color: &str, vx: f64, vy: f64, textured: bool, seed: u64) -> Result<Self> {
        let half = (N_FRAMES - 1) as f64 / 2.0;
        let c = SIZE as f64 / 2.0;
        let spec = MotionSpec {
            shape_kind: parse_shape(shape)?,
            color: parse_color(color)?,
            start_position: (c - half * vx, c - half * vy),
            velocity: (vx, vy),
            background: if textured { Background::Textured(seed) } else { Background::Flat },
            size_px: SHAPE_PX,
        };
        let (clip, truth) = make_clip(&spec, N_FRAMES, (SIZE, SIZE), seed)?;
        Ok(Self { clip, truth, caption: caption_of(&spec).text() })
    }

    pub fn frame_rgba(&self, i: usize) -> Result<Vec<u8>> {
        self.check_frame(i)?;
        Ok(tensor_rgba(&self.clip.frame(i), |x| x))
    }

    fn check_frame(&self, i: usize) -> Result<()> {
        if i >= self.clip.n_frames() {
            return Err(Error::InvalidArgument(format!("frame {i} out of range")));
        }
        Ok(())
    }

    /// Flow from frame `i` to `i + 1`, scored against the ground truth.
    pub fn flow(&self, i: usize, params: &FlowParams) -> Result<FlowReport> {
        if i + 1 >= self.clip.n_frames() {
            return Err(Error::InvalidArgument(format!("no frame after {i}")));
        }
        params.validate()?;
        let est = estimate_flow(&self.clip.frame(i), &self.clip.frame(i + 1), params)?;
        let truth = &self.truth[i];
        // Shared colour scale so the two images are comparable.
        let max_mag = Some(peak_magnitude(truth).max(peak_magnitude(&est)));
        Ok(FlowReport {
            estimate_rgba: rgb_to_rgba(&flow_to_rgb(&est, max_mag)),
            truth_rgba: rgb_to_rgba(&flow_to_rgb(truth, max_mag)),
            endpoint_error: est.mean_endpoint_error(truth),
            tv: tv_loss(&est),
            mean_flow: mean_uv(&est),
        })
    }
}

fn peak_magnitude(f: &FlowField) -> f64 {
    f.u().iter().zip(f.v()).map(|(u, v)| u.hypot(*v)).fold(0.0, f64::max)
}

fn mean_uv(f: &FlowField) -> (f64, f64) {
    let n = f.u().len().max(1) as f64;
    (f.u().iter().sum::<f64>() / n, f.v().iter().sum::<f64>() / n)
}

pub struct FlowReport {
    pub estimate_rgba: Vec<u8>,
    pub truth_rgba: Vec<u8>,
    pub endpoint_error: f64,
    pub tv: f64,
    pub mean_flow: (f64, f64),
}

fn rgb_to_rgba(rgb: &[u8]) -> Vec<u8> {
    rgb.chunks(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

/// `[3, H, W]` in pixel space, mapped through `f` and clamped to `[0, 1]`.
fn tensor_rgba(frame: &Tensor, f: impl Fn(f64) -> f64) -> Vec<u8> {
    let hw = frame.shape()[1] * frame.shape()[2];
    let d = frame.data();
    (0..hw)
        .flat_map(|p| {
            let px = |ch: usize| (f(d[ch * hw + p]).clamp(0.0, 1.0) * 255.0).round() as u8;
            [px(0), px(1), px(2), 255]
        })
        .collect()
}

pub fn schedule(t_train: usize, beta_lo: f64, beta_hi: f64) -> Result<NoiseSchedule> {
    make_schedule(t_train, beta_lo, beta_hi)
}

/// `alphabar` at `n_points` evenly spaced steps from 0 to `T`.
pub fn alphabar_curve(s: &NoiseSchedule, n_points: usize) -> Vec<f64> {
    let last = s.t_train();
    (0..n_points)
        .map(|k| {
            let t = if n_points > 1 { k * last / (n_points - 1) } else { 0 };
            s.alphabar(t)
        })
        .collect()
}

/// Frame `i` noised to step `t`, computed in `[-1, 1]` and shown in `[0, 1]`.
pub fn noised_frame(scene: &Scene, i: usize, t: usize, s: &NoiseSchedule, seed: u64) -> Result<Vec<u8>> {
    scene.check_frame(i)?;
    let x0 = scene.clip.frame(i).map(|x| 2.0 * x - 1.0);
    let eps = initial_noise(seed, x0.shape());
    let xt = forward_noise(&x0, t, &eps, s)?;
    Ok(tensor_rgba(&xt, |x| 0.5 * (x + 1.0)))
}
