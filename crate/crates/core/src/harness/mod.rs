//! Configuration, stage orchestration, sample storage, metrics and the CLI.

pub mod cli;
pub mod config;
pub mod metrics;
pub mod pipeline;
pub mod samples;

pub use config::{Config, SampleMode};
pub use metrics::{clip_metrics, evaluate, ClipMetrics, MetricReport};
pub use pipeline::{run_pipeline, PipelineOptions, PipelineOutcome, RunLayout, RunManifest, Stage};
