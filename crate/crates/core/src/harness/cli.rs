use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use super::config::{Config, SampleMode};
use super::metrics::evaluate;
use super::pipeline::{load_schedule, run_pipeline, PipelineOptions, RunLayout, Stage};
use super::samples::{sample_one, save_sample};
use crate::diffusion::DiffusionModel;
use crate::discriminator::Discriminator;
use crate::error::Result;
use crate::guidance::Models;
use crate::vocab::CaptionTokens;

#[derive(Debug, Parser)]
#[command(name = "flowprompt", version, about = "Flow-guided prompt optimisation for a toy video diffusion model")]
pub struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `run.seed`; for `sample` it is the sampling seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "runs/default")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Baseline,
    Motionprompt,
    Dps,
}

impl From<ModeArg> for SampleMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Baseline => SampleMode::Baseline,
            ModeArg::Motionprompt => SampleMode::MotionPrompt,
            ModeArg::Dps => SampleMode::Dps,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset.
    Synth,
    /// Train the denoiser (runs missing upstream stages first).
    TrainDiffusion,
    /// Extract real and generated flows for the discriminator.
    CollectFlows,
    TrainDiscriminator,
    /// Sample one clip into `<out>/cli/<mode>/<prompt>_s<seed>`.
    Sample {
        #[arg(long, value_enum, default_value = "baseline")]
        mode: ModeArg,
        #[arg(long)]
        prompt: String,
    },
    /// Score sample sets; without arguments, the pipeline's own samples.
    Eval {
        #[arg(long, requires = "candidate")]
        reference: Option<PathBuf>,
        #[arg(long, requires = "reference")]
        candidate: Option<PathBuf>,
    },
    /// Every stage, skipping those already up to date.
    Pipeline {
        /// Re-run stages whose outputs were produced by a different config.
        #[arg(long)]
        force: bool,
    },
    #[command(subcommand)]
    Config(ConfigCommand),
}

#[derive(Debug, Subcommand)]
pub enum ConfigCommand {
    /// Write every default value; prints to stdout without a path.
    Init { path: Option<PathBuf> },
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let (Some(seed), false) = (cli.seed, matches!(cli.command, Command::Sample { .. })) {
        cfg.run.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pipeline_until(cfg: &Config, out: &Path, until: Stage, force: bool) -> Result<()> {
    let outcome = run_pipeline(cfg, out, PipelineOptions { until, force })?;
    for rec in &outcome.manifest.stages {
        let status = if outcome.executed.contains(&rec.stage) { "ran" } else { "cached" };
        println!("{:<14} {status:<7} {:>9.1}s  key {}", rec.stage.name(), rec.seconds, rec.key);
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    if let Command::Config(ConfigCommand::Init { path }) = &cli.command {
        let text = Config::default().to_toml();
        match path {
            Some(p) => fs::write(p, text)?,
            None => print!("{text}"),
        }
        return Ok(());
    }
    let cfg = load_config(cli)?;
    let out = &cli.out;
    match &cli.command {
        Command::Synth => pipeline_until(&cfg, out, Stage::Data, false),
        Command::TrainDiffusion => pipeline_until(&cfg, out, Stage::Diffusion, false),
        Command::CollectFlows => pipeline_until(&cfg, out, Stage::Flows, false),
        Command::TrainDiscriminator => pipeline_until(&cfg, out, Stage::Discriminator, false),
        Command::Pipeline { force } => {
            pipeline_until(&cfg, out, Stage::Eval, *force)?;
            println!("manifest: {}", out.join(super::pipeline::MANIFEST_FILE).display());
            Ok(())
        }
        Command::Eval { reference, candidate } => match (reference, candidate) {
            (Some(r), Some(c)) => {
                let layout = RunLayout::new(out);
                let disc = if layout.discriminator().exists() {
                    Some(Discriminator::load(&layout.discriminator())?.0)
                } else {
                    None
                };
                let dir = out.join("cli_eval");
                let report = evaluate(r, c, &cfg.flow, disc.as_ref(), Some(&dir.join("flows")))?;
                fs::write(dir.join("report.json"), report.to_json())?;
                println!("{}", report.to_json());
                Ok(())
            }
            _ => {
                pipeline_until(&cfg, out, Stage::Eval, false)?;
                let report = fs::read_to_string(RunLayout::new(out).report())?;
                println!("{report}");
                Ok(())
            }
        },
        Command::Sample { mode, prompt } => {
            let mode = SampleMode::from(*mode);
            let prompt = CaptionTokens::parse(prompt)?;
            let needs_disc = mode != SampleMode::Baseline;
            let until = if needs_disc { Stage::Discriminator } else { Stage::Diffusion };
            pipeline_until(&cfg, out, until, false)?;
            let layout = RunLayout::new(out);
            let (model, _) = DiffusionModel::load(&layout.denoiser())?;
            let disc = if needs_disc {
                Discriminator::load(&layout.discriminator())?.0
            } else {
                Discriminator::new(cfg.discriminator.model.clone(), 0)?
            };
            let schedule = load_schedule(&cfg)?;
            let models = Models {
                diffusion: &model,
                schedule: &schedule,
                discriminator: &disc,
                flow: &cfg.flow,
                cfg_scale: cfg.sampler.cfg_scale,
            };
            let seed = cli.seed.unwrap_or(0);
            let key = format!("{}_s{seed}", prompt.words().join("-"));
            let sampled = sample_one(mode, &key, &prompt, seed, &cfg.guidance, &cfg.sampler, &models)?;
            let dir = out.join("cli").join(mode.name()).join(&key);
            if dir.exists() {
                fs::remove_dir_all(&dir)?;
            }
            save_sample(&sampled, &dir)?;
            println!("{}", dir.display());
            Ok(())
        }
        Command::Config(_) => unreachable!("handled above"),
    }
}

/// Parses arguments, runs, and maps errors to the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
