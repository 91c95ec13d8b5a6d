//! Pixel <-> latent codecs. Frames are `[N, C, H, W]` in both spaces.

use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub trait Codec {
    fn latent_shape(&self, pixel_shape: &[usize]) -> Vec<usize>;
    fn encode(&self, x: &Tensor) -> Tensor;
    /// Differentiable decode of `[k, C, H', W']` latents.
    fn decode_graph(&self, g: &mut Graph, z: Var) -> Var;

    fn decode(&self, z: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let out = self.decode_graph(&mut g, zv);
        g.value(out).clone()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    #[default]
    Identity,
    /// 2x2 block mean down, nearest-neighbour up.
    AvgPool2,
}

impl CodecKind {
    pub fn build(self) -> Box<dyn Codec + Send + Sync> {
        match self {
            CodecKind::Identity => Box::new(IdentityCodec),
            CodecKind::AvgPool2 => Box::new(AvgPool2Codec),
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityCodec;

impl Codec for IdentityCodec {
    fn latent_shape(&self, pixel_shape: &[usize]) -> Vec<usize> {
        pixel_shape.to_vec()
    }

    fn encode(&self, x: &Tensor) -> Tensor {
        x.clone()
    }

    fn decode_graph(&self, _g: &mut Graph, z: Var) -> Var {
        z
    }

    fn decode(&self, z: &Tensor) -> Tensor {
        z.clone()
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct AvgPool2Codec;

impl Codec for AvgPool2Codec {
    fn latent_shape(&self, s: &[usize]) -> Vec<usize> {
        vec![s[0], s[1], s[2] / 2, s[3] / 2]
    }

    fn encode(&self, x: &Tensor) -> Tensor {
        let s = x.shape();
        assert!(s.len() == 4 && s[2].is_multiple_of(2) && s[3].is_multiple_of(2), "avg_pool2 needs even [N, C, H, W]");
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(planes * ho * wo);
        for p in x.data().chunks(h * w) {
            for i in 0..ho {
                for j in 0..wo {
                    let at = |a: usize, b: usize| p[(2 * i + a) * w + 2 * j + b];
                    out.push((at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0);
                }
            }
        }
        Tensor::from_parts(&self.latent_shape(s), out)
    }

    fn decode_graph(&self, g: &mut Graph, z: Var) -> Var {
        g.upsample2(z)
    }
}
