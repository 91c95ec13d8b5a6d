//! Synthetic clips of moving shapes with analytic ground-truth flow.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{read_flo, write_flo, FlowField};
use crate::tensor::Tensor;
use crate::video::VideoClip;
use crate::vocab::{id_of, CaptionTokens};

pub const MAX_SPEED: f64 = 4.0;
const SUPERSAMPLE: usize = 4;
const FLAT_BACKGROUND: f64 = 0.12;

pub const PALETTE: &[(&str, [f64; 3])] = &[
    ("red", [0.9, 0.15, 0.1]),
    ("green", [0.15, 0.8, 0.2]),
    ("blue", [0.15, 0.3, 0.95]),
    ("yellow", [0.95, 0.9, 0.15]),
    ("cyan", [0.1, 0.85, 0.9]),
    ("magenta", [0.9, 0.15, 0.85]),
    ("white", [0.95, 0.95, 0.95]),
    ("orange", [0.95, 0.55, 0.1]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Bar,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Bar];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Bar => "bar",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    Flat,
    Textured(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    pub shape_kind: ShapeKind,
    pub color: [f64; 3],
    /// Shape centre in frame 0, pixels.
    pub start_position: (f64, f64),
    /// Pixels per frame.
    pub velocity: (f64, f64),
    pub background: Background,
    pub size_px: u32,
}

impl MotionSpec {
    fn half_extent(&self) -> (f64, f64) {
        let s = self.size_px as f64;
        match self.shape_kind {
            ShapeKind::Circle | ShapeKind::Square => (s / 2.0, s / 2.0),
            ShapeKind::Bar => (s / 2.0, (s / 6.0).max(1.0)),
        }
    }

    fn contains(&self, cx: f64, cy: f64, x: f64, y: f64) -> bool {
        let (hx, hy) = self.half_extent();
        let (dx, dy) = (x - cx, y - cy);
        match self.shape_kind {
            ShapeKind::Circle => dx * dx + dy * dy <= hx * hx,
            ShapeKind::Square | ShapeKind::Bar => dx.abs() <= hx && dy.abs() <= hy,
        }
    }

    /// Brightness factor at offset `(dx, dy)` from the centre: an off-centre
    /// highlight that moves rigidly with the shape, so interiors carry gradients.
    fn shade(&self, dx: f64, dy: f64) -> f64 {
        let r = self.size_px as f64 / 3.0;
        let (hx, hy) = (dx + r / 2.0, dy + r / 2.0);
        0.6 + 0.4 * (-(hx * hx + hy * hy) / (2.0 * r * r)).exp()
    }

    pub fn speed(&self) -> f64 {
        self.velocity.0.hypot(self.velocity.1)
    }

    pub fn is_static(&self) -> bool {
        self.velocity == (0.0, 0.0)
    }

    pub fn validate(&self, n_frames: usize, (h, w): (usize, usize)) -> Result<()> {
        if self.size_px == 0 {
            return Err(Error::RejectedSpec("size_px must be positive".into()));
        }
        if !self.color.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(Error::RejectedSpec("color outside [0, 1]".into()));
        }
        if !(self.speed() <= MAX_SPEED) {
            return Err(Error::RejectedSpec(format!(
                "speed {:.3} exceeds {MAX_SPEED} px/frame",
                self.speed()
            )));
        }
        if n_frames < 2 {
            return Err(Error::RejectedSpec("need at least 2 frames".into()));
        }
        let (hx, hy) = self.half_extent();
        let last = (n_frames - 1) as f64;
        for k in [0.0, last] {
            let cx = self.start_position.0 + k * self.velocity.0;
            let cy = self.start_position.1 + k * self.velocity.1;
            if cx - hx < 0.0 || cx + hx > w as f64 || cy - hy < 0.0 || cy + hy > h as f64 {
                return Err(Error::RejectedSpec(format!(
                    "trajectory leaves the {w}x{h} frame at frame {k}"
                )));
            }
        }
        Ok(())
    }
}

/// Smooth texture, periodic over the frame, built from a few low-frequency cosines.
#[derive(Clone, Debug)]
pub struct PeriodicTexture {
    h: usize,
    w: usize,
    base: [f64; 3],
    // (fx, fy, phase, per-channel amplitude)
    waves: Vec<(f64, f64, f64, [f64; 3])>,
}

impl PeriodicTexture {
    pub fn new(seed: u64, h: usize, w: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = [
            rng.random_range(0.4..0.5),
            rng.random_range(0.4..0.5),
            rng.random_range(0.4..0.5),
        ];
        // One horizontal and one vertical wave guarantee gradients in both
        // directions; two more add variety.
        let waves = (0..4)
            .map(|k| {
                let (mut fx, mut fy) = match k {
                    0 => (rng.random_range(1i32..=2), 0),
                    1 => (0, rng.random_range(1i32..=2)),
                    _ => (rng.random_range(-2i32..=2), rng.random_range(-2i32..=2)),
                };
                if fx == 0 && fy == 0 {
                    fx = 1;
                    fy = 1;
                }
                let amp = rng.random_range(0.06..0.1);
                let phase = rng.random_range(0.0..TAU);
                let gain = [
                    rng.random_range(0.6..1.0),
                    rng.random_range(0.6..1.0),
                    rng.random_range(0.6..1.0),
                ];
                (fx as f64, fy as f64, phase, gain.map(|g| g * amp))
            })
            .collect();
        Self { h, w, base, waves }
    }

    pub fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let mut out = self.base;
        for (fx, fy, phase, amp) in &self.waves {
            let c = (TAU * (fx * x / self.w as f64 + fy * y / self.h as f64) + phase).cos();
            for (o, a) in out.iter_mut().zip(amp) {
                *o += a * c;
            }
        }
        out
    }

    /// `[3, H, W]` image with content displaced by `(dx, dy)`: pixel `(i, j)`
    /// shows the texture at `(j - dx, i - dy)`.
    pub fn render(&self, dx: f64, dy: f64) -> Tensor {
        let (h, w) = (self.h, self.w);
        let mut data = vec![0.0; 3 * h * w];
        for i in 0..h {
            for j in 0..w {
                let c = self.sample(j as f64 - dx, i as f64 - dy);
                for ch in 0..3 {
                    data[ch * h * w + i * w + j] = c[ch];
                }
            }
        }
        Tensor::from_parts(&[3, h, w], data)
    }
}

fn mix_seed(a: u64, b: u64) -> u64 {
    a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.rotate_left(29) ^ 0xD6E8_FEB8_6659_FD93
}

/// Renders `spec` and returns the clip plus `N - 1` ground-truth flows, where
/// flow `i` maps frame `i` toward frame `i + 1`.
pub fn make_clip(
    spec: &MotionSpec,
    n_frames: usize,
    (h, w): (usize, usize),
    rng_seed: u64,
) -> Result<(VideoClip, Vec<FlowField>)> {
    spec.validate(n_frames, (h, w))?;
    let background: Vec<[f64; 3]> = match spec.background {
        Background::Flat => vec![[FLAT_BACKGROUND; 3]; h * w],
        Background::Textured(seed) => {
            let tex = PeriodicTexture::new(mix_seed(seed, rng_seed), h, w);
            (0..h * w)
                .map(|p| tex.sample((p % w) as f64, (p / w) as f64))
                .collect()
        }
    };
    let sub = SUPERSAMPLE as f64;
    let mut frames = Vec::with_capacity(n_frames);
    let mut flows = Vec::with_capacity(n_frames - 1);
    for k in 0..n_frames {
        let cx = spec.start_position.0 + k as f64 * spec.velocity.0;
        let cy = spec.start_position.1 + k as f64 * spec.velocity.1;
        let mut data = vec![0.0; 3 * h * w];
        let mut u = vec![0.0; h * w];
        let mut v = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let mut hits = 0usize;
                let mut shade = 0.0;
                for a in 0..SUPERSAMPLE {
                    for b in 0..SUPERSAMPLE {
                        let x = j as f64 + (b as f64 + 0.5) / sub;
                        let y = i as f64 + (a as f64 + 0.5) / sub;
                        if spec.contains(cx, cy, x, y) {
                            hits += 1;
                            shade += spec.shade(x - cx, y - cy);
                        }
                    }
                }
                let n_sub = sub * sub;
                let cov = hits as f64 / n_sub;
                let p = i * w + j;
                for ch in 0..3 {
                    data[ch * h * w + p] = (background[p][ch] * (1.0 - cov)
                        + spec.color[ch] * shade / n_sub)
                        .clamp(0.0, 1.0);
                }
                if cov >= 0.5 {
                    u[p] = spec.velocity.0;
                    v[p] = spec.velocity.1;
                }
            }
        }
        frames.push(Tensor::from_parts(&[3, h, w], data));
        if k + 1 < n_frames {
            flows.push(FlowField::from_uv(h, w, u, v)?);
        }
    }
    let clip = VideoClip::new(Tensor::stack(&frames)?)?;
    Ok((clip, flows))
}

fn nearest_color(color: [f64; 3]) -> &'static str {
    PALETTE
        .iter()
        .min_by(|a, b| {
            let da: f64 = a.1.iter().zip(&color).map(|(x, y)| (x - y).powi(2)).sum();
            let db: f64 = b.1.iter().zip(&color).map(|(x, y)| (x - y).powi(2)).sum();
            da.total_cmp(&db)
        })
        .map(|(n, _)| *n)
        .expect("palette is nonempty")
}

/// Caption such as "red circle moving up right on plain".
pub fn caption_of(spec: &MotionSpec) -> CaptionTokens {
    let mut words = vec![nearest_color(spec.color), spec.shape_kind.word()];
    if spec.is_static() {
        words.push("static");
    } else {
        words.push("moving");
        let (dx, dy) = spec.velocity;
        if dy < 0.0 {
            words.push("up");
        } else if dy > 0.0 {
            words.push("down");
        }
        if dx < 0.0 {
            words.push("left");
        } else if dx > 0.0 {
            words.push("right");
        }
    }
    words.push("on");
    words.push(match spec.background {
        Background::Flat => "plain",
        Background::Textured(_) => "textured",
    });
    let ids = words
        .iter()
        .map(|w| id_of(w).expect("caption words are in the vocabulary"))
        .collect();
    CaptionTokens::new(ids).expect("caption has no slots")
}

/// One clip of a dataset with its provenance.
#[derive(Clone, Debug)]
pub struct Sample {
    pub spec: MotionSpec,
    pub clip: VideoClip,
    pub caption: CaptionTokens,
    pub gt_flows: Vec<FlowField>,
    pub clip_seed: u64,
}

const VELOCITY_STEPS: [f64; 9] = [-2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0];

/// Draws a random valid spec for the given geometry.
pub fn random_spec(rng: &mut impl Rng, n_frames: usize, (h, w): (usize, usize)) -> MotionSpec {
    loop {
        let shape_kind = ShapeKind::ALL[rng.random_range(0..3)];
        let color = PALETTE[rng.random_range(0..PALETTE.len())].1;
        let velocity = if rng.random_bool(0.15) {
            (0.0, 0.0)
        } else {
            loop {
                let v = (
                    VELOCITY_STEPS[rng.random_range(0..VELOCITY_STEPS.len())],
                    VELOCITY_STEPS[rng.random_range(0..VELOCITY_STEPS.len())],
                );
                if v != (0.0, 0.0) {
                    break v;
                }
            }
        };
        let size_px = match shape_kind {
            ShapeKind::Bar => rng.random_range(10..=14),
            _ => rng.random_range(7..=11),
        };
        let background = if rng.random_bool(0.4) {
            Background::Textured(rng.random())
        } else {
            Background::Flat
        };
        let mut spec = MotionSpec {
            shape_kind,
            color,
            start_position: (0.0, 0.0),
            velocity,
            background,
            size_px,
        };
        let (hx, hy) = spec.half_extent();
        let travel = (n_frames - 1) as f64;
        let x_lo = hx - velocity.0.min(0.0) * travel;
        let x_hi = w as f64 - hx - velocity.0.max(0.0) * travel;
        let y_lo = hy - velocity.1.min(0.0) * travel;
        let y_hi = h as f64 - hy - velocity.1.max(0.0) * travel;
        if x_lo > x_hi || y_lo > y_hi {
            continue;
        }
        let x = if x_hi > x_lo { rng.random_range(x_lo..=x_hi) } else { x_lo };
        let y = if y_hi > y_lo { rng.random_range(y_lo..=y_hi) } else { y_lo };
        // Quarter-pixel grid keeps renders reproducible across platforms.
        spec.start_position = (
            ((x * 4.0).round() / 4.0).clamp(x_lo, x_hi),
            ((y * 4.0).round() / 4.0).clamp(y_lo, y_hi),
        );
        if spec.validate(n_frames, (h, w)).is_ok() {
            return spec;
        }
    }
}

/// A deterministic corpus of `n_clips` captioned clips.
pub fn make_dataset(
    n_clips: usize,
    resolution: (usize, usize),
    n_frames: usize,
    rng_seed: u64,
) -> Result<Vec<Sample>> {
    if n_clips == 0 {
        return Err(Error::InvalidArgument("n_clips must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    (0..n_clips)
        .map(|_| {
            let spec = random_spec(&mut rng, n_frames, resolution);
            let clip_seed: u64 = rng.random();
            let (clip, gt_flows) = make_clip(&spec, n_frames, resolution, clip_seed)?;
            Ok(Sample {
                caption: caption_of(&spec),
                spec,
                clip,
                gt_flows,
                clip_seed,
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ClipMeta {
    caption: String,
    token_ids: Vec<usize>,
    n_frames: usize,
    clip_seed: u64,
    spec: MotionSpec,
}

/// Persists one directory per clip: `frame_%04d.png`, `flow_%04d.flo`, `meta.toml`.
pub fn save_dataset(samples: &[Sample], dir: &Path) -> Result<()> {
    for (k, s) in samples.iter().enumerate() {
        let cdir = dir.join(format!("clip_{k:04}"));
        s.clip.save_pngs(&cdir)?;
        for (i, f) in s.gt_flows.iter().enumerate() {
            write_flo(f, cdir.join(format!("flow_{i:04}.flo")))?;
        }
        let meta = ClipMeta {
            caption: s.caption.text(),
            token_ids: s.caption.ids().to_vec(),
            n_frames: s.clip.n_frames(),
            clip_seed: s.clip_seed,
            spec: s.spec.clone(),
        };
        let text = toml::to_string(&meta).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(cdir.join("meta.toml"), text)?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let mut dirs: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("clip_"))
        })
        .collect();
    dirs.sort();
    dirs.iter()
        .map(|cdir| {
            let text = fs::read_to_string(cdir.join("meta.toml"))?;
            let meta: ClipMeta = toml::from_str(&text)
                .map_err(|e| Error::format(cdir.join("meta.toml"), e.to_string()))?;
            let clip = VideoClip::load_pngs(cdir, meta.n_frames)?;
            let gt_flows = (0..meta.n_frames - 1)
                .map(|i| read_flo(cdir.join(format!("flow_{i:04}.flo"))))
                .collect::<Result<Vec<_>>>()?;
            Ok(Sample {
                spec: meta.spec,
                clip,
                caption: CaptionTokens::new(meta.token_ids)?,
                gt_flows,
                clip_seed: meta.clip_seed,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::photometric_error;

    fn spec(kind: ShapeKind, color: [f64; 3], velocity: (f64, f64)) -> MotionSpec {
        MotionSpec {
            shape_kind: kind,
            color,
            start_position: (10.0, 16.0),
            velocity,
            background: Background::Flat,
            size_px: 8,
        }
    }

    const RED: [f64; 3] = [0.9, 0.15, 0.1];
    const BLUE: [f64; 3] = [0.15, 0.3, 0.95];

    #[test]
    fn unit_motion_shifts_shape_one_pixel() {
        let (clip, flows) = make_clip(&spec(ShapeKind::Circle, RED, (1.0, 0.0)), 8, (32, 32), 0).unwrap();
        assert_eq!(clip.n_frames(), 8);
        assert_eq!(flows.len(), 7);
        let (h, w) = (32, 32);
        for k in 0..7 {
            let (a, b) = (clip.frame(k), clip.frame(k + 1));
            for ch in 0..3 {
                for i in 0..h {
                    for j in 0..w - 1 {
                        assert!(
                            (b.data()[ch * h * w + i * w + j + 1] - a.data()[ch * h * w + i * w + j]).abs() < 1e-12
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn static_spec_is_bitwise_constant_with_zero_flow() {
        let mut s = spec(ShapeKind::Square, BLUE, (0.0, 0.0));
        s.background = Background::Textured(3);
        let (clip, flows) = make_clip(&s, 8, (32, 32), 5).unwrap();
        for k in 1..8 {
            assert_eq!(clip.frame(k), clip.frame(0));
        }
        assert!(flows.iter().all(|f| f.tensor().data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn out_of_bounds_and_fast_specs_are_rejected() {
        let s = spec(ShapeKind::Circle, RED, (3.0, 0.0));
        assert!(matches!(make_clip(&s, 8, (32, 32), 0), Err(Error::RejectedSpec(_))));
        let mut fast = spec(ShapeKind::Circle, RED, (4.5, 0.0));
        fast.start_position = (5.0, 16.0);
        assert!(matches!(fast.validate(2, (64, 64)), Err(Error::RejectedSpec(_))));
    }

    #[test]
    fn ground_truth_flow_reproduces_previous_frame() {
        let samples = make_dataset(40, (32, 32), 8, 11).unwrap();
        for s in &samples {
            let mut err = 0.0;
            for (k, f) in s.gt_flows.iter().enumerate() {
                err += photometric_error(&s.clip.frame(k), &s.clip.frame(k + 1), f).unwrap();
            }
            err /= s.gt_flows.len() as f64;
            assert!(err < 0.02, "{:?}: {err}", s.spec);
        }
    }

    #[test]
    fn dataset_is_deterministic() {
        let a = make_dataset(2, (32, 32), 8, 7).unwrap();
        let b = make_dataset(2, (32, 32), 8, 7).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.clip, y.clip);
            assert_eq!(x.caption, y.caption);
            assert_eq!(x.gt_flows, y.gt_flows);
        }
    }

    #[test]
    fn captions_follow_the_mapping_table() {
        let c = caption_of(&spec(ShapeKind::Circle, RED, (1.0, 0.0)));
        for w in ["red", "circle", "right"] {
            assert!(c.contains_word(w));
        }
        let c = caption_of(&spec(ShapeKind::Bar, BLUE, (0.0, -1.0)));
        for w in ["blue", "bar", "up"] {
            assert!(c.contains_word(w));
        }
        assert!(caption_of(&spec(ShapeKind::Circle, RED, (0.0, 0.0))).contains_word("static"));
        let a = caption_of(&spec(ShapeKind::Square, RED, (1.0, 1.0)));
        let b = caption_of(&spec(ShapeKind::Square, BLUE, (1.0, 1.0)));
        let diffs: Vec<_> = a.ids().iter().zip(b.ids()).filter(|(x, y)| x != y).collect();
        assert_eq!(a.len(), b.len());
        assert_eq!(diffs.len(), 1);
        assert_eq!(a.words()[0], "red");
        assert_eq!(b.words()[0], "blue");
        assert_eq!(a.n_slots(), 0);
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let samples = make_dataset(3, (16, 16), 4, 2).unwrap();
        save_dataset(&samples, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.caption, b.caption);
            assert_eq!(a.spec, b.spec);
            assert_eq!(b.gt_flows, a.gt_flows.iter().map(|f| f.to_f32_precision()).collect::<Vec<_>>());
            let diff = a.clip.tensor().zip_map(b.clip.tensor(), |x, y| (x - y).abs()).max_abs();
            assert!(diff <= 0.5 / 255.0 + 1e-12);
        }
    }
}
