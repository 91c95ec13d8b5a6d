//! Toy conditional video diffusion: schedule, denoiser, text encoder, codec,
//! training and DDIM sampling with classifier-free guidance.

pub mod codec;
pub mod model;
pub mod sample;
pub mod schedule;
pub mod train;

pub use codec::{AvgPool2Codec, Codec, CodecKind, IdentityCodec};
pub use model::{Bound, DenoiserConfig, DiffusionModel, TextEmbedding};
pub use sample::{
    cfg_combine, cfg_predict, check_finite, ddim_sample, decode_clip, initial_noise, sample_baseline, SampleOutput,
    SamplerConfig,
};
pub use schedule::{
    ddim_step, forward_noise, make_schedule, tweedie, tweedie_graph, NoiseSchedule, ScheduleConfig,
};
pub use train::{gaussian, train_denoiser, TrainConfig, TrainExample, TrainReport};
