//! Flow colour coding with the standard Middlebury colour wheel.

use std::path::Path;

use super::FlowField;
use crate::error::Result;

fn color_wheel() -> Vec<[f64; 3]> {
    const RY: usize = 15;
    const YG: usize = 6;
    const GC: usize = 4;
    const CB: usize = 11;
    const BM: usize = 13;
    const MR: usize = 6;
    let mut wheel = Vec::with_capacity(RY + YG + GC + CB + BM + MR);
    for i in 0..RY {
        wheel.push([255.0, 255.0 * i as f64 / RY as f64, 0.0]);
    }
    for i in 0..YG {
        wheel.push([255.0 - 255.0 * i as f64 / YG as f64, 255.0, 0.0]);
    }
    for i in 0..GC {
        wheel.push([0.0, 255.0, 255.0 * i as f64 / GC as f64]);
    }
    for i in 0..CB {
        wheel.push([0.0, 255.0 - 255.0 * i as f64 / CB as f64, 255.0]);
    }
    for i in 0..BM {
        wheel.push([255.0 * i as f64 / BM as f64, 0.0, 255.0]);
    }
    for i in 0..MR {
        wheel.push([255.0, 0.0, 255.0 - 255.0 * i as f64 / MR as f64]);
    }
    wheel
}

/// RGB8 pixels (row-major, 3 bytes each). Magnitudes are normalised by
/// `max_magnitude`, or by the field's own maximum when `None`.
pub fn flow_to_rgb(flow: &FlowField, max_magnitude: Option<f64>) -> Vec<u8> {
    let wheel = color_wheel();
    let ncols = wheel.len() as f64;
    let max_mag = max_magnitude.unwrap_or_else(|| {
        flow.u()
            .iter()
            .zip(flow.v())
            .map(|(u, v)| (u * u + v * v).sqrt())
            .fold(0.0, f64::max)
    });
    let scale = if max_mag > 0.0 { 1.0 / max_mag } else { 0.0 };
    let mut out = Vec::with_capacity(flow.u().len() * 3);
    for (&u, &v) in flow.u().iter().zip(flow.v()) {
        let (u, v) = (u * scale, v * scale);
        let rad = (u * u + v * v).sqrt().min(1.0);
        let angle = (-v).atan2(-u) / std::f64::consts::PI;
        let fk = (angle + 1.0) / 2.0 * (ncols - 1.0);
        let k0 = fk.floor() as usize % wheel.len();
        let k1 = (k0 + 1) % wheel.len();
        let f = fk - fk.floor();
        for (a, b) in wheel[k0].iter().zip(&wheel[k1]) {
            let col = ((1.0 - f) * a + f * b) / 255.0;
            let col = 1.0 - rad * (1.0 - col);
            out.push((col * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

pub fn save_flow_png(flow: &FlowField, max_magnitude: Option<f64>, path: impl AsRef<Path>) -> Result<()> {
    let rgb = flow_to_rgb(flow, max_magnitude);
    image::save_buffer(
        path,
        &rgb,
        flow.width() as u32,
        flow.height() as u32,
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(())
}
