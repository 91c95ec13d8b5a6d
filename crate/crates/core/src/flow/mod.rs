//! Optical flow: variational estimation, smoothness loss, warping, and `.flo` files.

mod flo;
mod hs;
mod tv;
mod viz;
mod warp;

pub use flo::{read_flo, write_flo, FLO_MAGIC};
pub use hs::{estimate_flow, estimate_flow_graph, FlowEstimator, FlowParams, HornSchunck};
pub use tv::{tv_loss, tv_loss_graph, tv_sum};
pub use viz::{flow_to_rgb, save_flow_png};
pub use warp::{photometric_error, warp};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-pixel displacement in pixels, stored as a `[2, H, W]` tensor
/// (channel 0 horizontal `u`, channel 1 vertical `v`).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    data: Tensor,
}

impl FlowField {
    pub fn new(data: Tensor) -> Result<Self> {
        let s = data.shape();
        if s.len() != 3 || s[0] != 2 {
            return Err(Error::Shape(format!("flow must be [2, H, W], got {s:?}")));
        }
        if !data.all_finite() {
            return Err(Error::NonFinite("flow field".into()));
        }
        Ok(Self { data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            data: Tensor::zeros(&[2, h, w]),
        }
    }

    /// Uniform field `(u, v)` everywhere.
    pub fn uniform(h: usize, w: usize, u: f64, v: f64) -> Self {
        let mut data = vec![u; h * w];
        data.extend(std::iter::repeat_n(v, h * w));
        Self {
            data: Tensor::from_parts(&[2, h, w], data),
        }
    }

    pub fn from_uv(h: usize, w: usize, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if u.len() != h * w || v.len() != h * w {
            return Err(Error::Shape("u/v length must be H*W".into()));
        }
        let mut data = u;
        data.extend(v);
        Self::new(Tensor::from_parts(&[2, h, w], data))
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn u(&self) -> &[f64] {
        let n = self.height() * self.width();
        &self.data.data()[..n]
    }

    pub fn v(&self) -> &[f64] {
        let n = self.height() * self.width();
        &self.data.data()[n..]
    }

    pub fn at(&self, i: usize, j: usize) -> (f64, f64) {
        let k = i * self.width() + j;
        (self.u()[k], self.v()[k])
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    /// Mean Euclidean distance to `other`.
    pub fn mean_endpoint_error(&self, other: &FlowField) -> f64 {
        let n = self.u().len();
        let mut acc = 0.0;
        for k in 0..n {
            let du = self.u()[k] - other.u()[k];
            let dv = self.v()[k] - other.v()[k];
            acc += (du * du + dv * dv).sqrt();
        }
        acc / n as f64
    }

    pub fn mean_magnitude(&self) -> f64 {
        let n = self.u().len();
        self.u()
            .iter()
            .zip(self.v())
            .map(|(u, v)| (u * u + v * v).sqrt())
            .sum::<f64>()
            / n as f64
    }

    /// The field rounded through `f32`, as stored in `.flo` files.
    pub fn to_f32_precision(&self) -> FlowField {
        FlowField {
            data: self.data.map(|x| x as f32 as f64),
        }
    }
}
