#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod diffusion;
pub mod discriminator;
pub mod error;
pub mod flow;
pub mod graph;
pub mod guidance;
pub mod harness;
pub mod nn;
pub mod pairs;
pub mod synth;
pub mod tensor;
pub mod video;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::Tensor;
