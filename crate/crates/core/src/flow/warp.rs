use super::FlowField;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Backward warp: `out(x) = frame(x + flow(x))`, bilinear, with sample
/// coordinates clamped to the border.
pub fn warp(frame: &Tensor, flow: &FlowField) -> Result<Tensor> {
    let s = frame.shape();
    if s.len() != 3 || s[1] != flow.height() || s[2] != flow.width() {
        return Err(Error::Shape(format!(
            "frame {s:?} vs flow {}x{}",
            flow.height(),
            flow.width()
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = vec![0.0; frame.len()];
    for i in 0..h {
        for j in 0..w {
            let (u, v) = flow.at(i, j);
            let x = (j as f64 + u).clamp(0.0, (w - 1) as f64);
            let y = (i as f64 + v).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (x.floor() as usize, y.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (x - x0 as f64, y - y0 as f64);
            for ch in 0..c {
                let p = &frame.data()[ch * h * w..(ch + 1) * h * w];
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bottom = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                out[ch * h * w + i * w + j] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Ok(Tensor::from_parts(s, out))
}

/// Mean absolute difference between `frame_a` and `frame_b` warped by `flow`.
pub fn photometric_error(frame_a: &Tensor, frame_b: &Tensor, flow: &FlowField) -> Result<f64> {
    if frame_a.shape() != frame_b.shape() {
        return Err(Error::Shape("photometric_error: frame shapes differ".into()));
    }
    let warped = warp(frame_b, flow)?;
    Ok(frame_a
        .data()
        .iter()
        .zip(warped.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / frame_a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_parts(
            &[c, h, w],
            (0..c * h * w).map(|i| ((i * 7919) % 101) as f64 / 101.0).collect(),
        )
    }

    #[test]
    fn zero_flow_is_exact_identity() {
        let f = ramp(3, 6, 5);
        let out = warp(&f, &FlowField::zeros(6, 5)).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn integer_flow_is_a_shift_away_from_the_border() {
        let (h, w) = (6, 7);
        let f = ramp(1, h, w);
        let out = warp(&f, &FlowField::uniform(h, w, 1.0, 0.0)).unwrap();
        for i in 0..h {
            for j in 0..w - 1 {
                assert_eq!(out.data()[i * w + j], f.data()[i * w + j + 1]);
            }
            // last column clamps onto itself
            assert_eq!(out.data()[i * w + w - 1], f.data()[i * w + w - 1]);
        }
    }

    #[test]
    fn identical_frames_zero_flow_zero_error() {
        let f = ramp(3, 4, 4);
        assert_eq!(photometric_error(&f, &f, &FlowField::zeros(4, 4)).unwrap(), 0.0);
    }
}
