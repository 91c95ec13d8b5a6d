//! Stage orchestration with config-hash caching.
//!
//! Each stage writes its outputs and then `stage.toml` holding its key (a hash
//! of its config sections and upstream keys). A stage is skipped when the
//! record matches and its outputs are present; a record with a different key
//! is refused unless the run is forced.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{section_hash, Config, FakeSource, SampleMode};
use super::metrics::{evaluate, MetricReport};
use super::samples::{sample_key, sample_one, save_sample};
use crate::diffusion::{train_denoiser, DiffusionModel, NoiseSchedule, TrainExample};
use crate::discriminator::{
    clip_flows, collect_real_flows, train_discriminator, Discriminator, FlowCorpus, Label,
};
use crate::error::{Error, Result};
use crate::guidance::Models;
use crate::synth::{caption_of, load_dataset, make_dataset, random_spec, save_dataset};
use crate::vocab::CaptionTokens;

pub const STAGE_FILE: &str = "stage.toml";
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Data,
    Diffusion,
    Flows,
    Discriminator,
    Samples,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Data,
        Stage::Diffusion,
        Stage::Flows,
        Stage::Discriminator,
        Stage::Samples,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Diffusion => "diffusion",
            Stage::Flows => "flows",
            Stage::Discriminator => "discriminator",
            Stage::Samples => "samples",
            Stage::Eval => "eval",
        }
    }
}

/// Independent seed streams per stage.
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    master.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ tag.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub stage: Stage,
    pub key: String,
    pub seconds: f64,
    #[serde(default)]
    pub info: toml::Table,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: toml::Table,
    pub seeds: toml::Table,
    pub checkpoints: toml::Table,
    pub stages: Vec<StageRecord>,
    pub metrics: toml::Table,
    /// Output locations relative to the run directory.
    pub artifacts: Vec<String>,
}

#[derive(Clone, Copy, Debug)]
pub struct PipelineOptions {
    /// Last stage to run.
    pub until: Stage,
    /// Re-run stages whose recorded key no longer matches the config.
    pub force: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            until: Stage::Eval,
            force: false,
        }
    }
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub manifest: RunManifest,
    pub executed: Vec<Stage>,
}

/// Filesystem layout of one run directory.
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn stage_dir(&self, s: Stage) -> PathBuf {
        self.root.join(s.name())
    }

    pub fn clips(&self) -> PathBuf {
        self.stage_dir(Stage::Data).join("clips")
    }

    pub fn denoiser(&self) -> PathBuf {
        self.stage_dir(Stage::Diffusion).join("final")
    }

    pub fn early_denoiser(&self) -> PathBuf {
        self.stage_dir(Stage::Diffusion).join("early")
    }

    pub fn corpus(&self) -> PathBuf {
        self.stage_dir(Stage::Flows).join("corpus")
    }

    pub fn discriminator(&self) -> PathBuf {
        self.stage_dir(Stage::Discriminator).join("model")
    }

    pub fn sample_set(&self, mode: SampleMode) -> PathBuf {
        self.stage_dir(Stage::Samples).join(mode.name())
    }

    pub fn report(&self) -> PathBuf {
        self.stage_dir(Stage::Eval).join("report.json")
    }

    fn outputs_present(&self, s: Stage, cfg: &Config) -> bool {
        let ckpt = |d: PathBuf| d.join(crate::checkpoint::MANIFEST_FILE).is_file();
        match s {
            Stage::Data => self.clips().join(format!("clip_{:04}", cfg.data.n_clips - 1)).is_dir(),
            Stage::Diffusion => ckpt(self.denoiser()) && ckpt(self.early_denoiser()),
            Stage::Flows => self.corpus().join("index.toml").is_file(),
            Stage::Discriminator => ckpt(self.discriminator()),
            Stage::Samples => cfg.eval.modes.iter().all(|m| self.sample_set(*m).is_dir()),
            Stage::Eval => self.report().is_file(),
        }
    }
}

fn read_record(dir: &Path) -> Result<Option<StageRecord>> {
    let path = dir.join(STAGE_FILE);
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path)?;
    let rec = toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    Ok(Some(rec))
}

fn write_record(dir: &Path, rec: &StageRecord) -> Result<()> {
    let text = toml::to_string(rec).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join(STAGE_FILE), text)?;
    Ok(())
}

fn stage_keys(cfg: &Config) -> Vec<(Stage, String)> {
    let data = section_hash(&(&cfg.run, &cfg.data), &[]);
    let diffusion = section_hash(&cfg.diffusion, &[&data]);
    let flows = section_hash(&(&cfg.sampler, &cfg.flow, &cfg.corpus), &[&data, &diffusion]);
    let disc = section_hash(&cfg.discriminator, &[&flows]);
    let samples = section_hash(&(&cfg.sampler, &cfg.guidance, &cfg.eval), &[&diffusion, &disc]);
    let eval = section_hash(&cfg.flow, &[&samples]);
    vec![
        (Stage::Data, data),
        (Stage::Diffusion, diffusion),
        (Stage::Flows, flows),
        (Stage::Discriminator, disc),
        (Stage::Samples, samples),
        (Stage::Eval, eval),
    ]
}

/// Prompts for evaluation, drawn from specs independent of the training set.
pub fn eval_prompts(cfg: &Config) -> Vec<CaptionTokens> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.run.seed, 5));
    (0..cfg.eval.n_prompts)
        .map(|_| caption_of(&random_spec(&mut rng, cfg.data.n_frames, (cfg.data.height, cfg.data.width))))
        .collect()
}

/// Sampling seed of the `j`-th draw for prompt `k`; shared by every mode.
pub fn eval_seed(cfg: &Config, k: usize, j: usize) -> u64 {
    (k * cfg.eval.seeds_per_prompt + j) as u64
}

pub fn load_schedule(cfg: &Config) -> Result<NoiseSchedule> {
    cfg.diffusion.schedule.build()
}

pub fn run_pipeline(cfg: &Config, root: &Path, opts: PipelineOptions) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let layout = RunLayout::new(root);
    fs::create_dir_all(root)?;
    let mut executed = Vec::new();
    let mut records = Vec::new();
    let mut upstream_ran = false;
    for (stage, key) in stage_keys(cfg) {
        if stage > opts.until {
            break;
        }
        let dir = layout.stage_dir(stage);
        let existing = read_record(&dir)?;
        if let Some(rec) = &existing {
            if rec.key != key && !opts.force {
                return Err(Error::StaleStage {
                    stage: stage.name().into(),
                    found: rec.key.clone(),
                    expected: key,
                });
            }
            if rec.key == key && !upstream_ran && layout.outputs_present(stage, cfg) {
                records.push(rec.clone());
                continue;
            }
        }
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        let start = Instant::now();
        let info = run_stage(stage, cfg, &layout)?;
        let rec = StageRecord {
            stage,
            key,
            seconds: start.elapsed().as_secs_f64(),
            info,
        };
        write_record(&dir, &rec)?;
        records.push(rec);
        executed.push(stage);
        upstream_ran = true;
    }
    let manifest = build_manifest(cfg, &layout, records)?;
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(root.join(MANIFEST_FILE), text)?;
    Ok(PipelineOutcome { manifest, executed })
}

fn run_stage(stage: Stage, cfg: &Config, layout: &RunLayout) -> Result<toml::Table> {
    let mut info = toml::Table::new();
    let seed = cfg.run.seed;
    match stage {
        Stage::Data => {
            let d = &cfg.data;
            let ds = make_dataset(d.n_clips, (d.height, d.width), d.n_frames, derive_seed(seed, 0))?;
            save_dataset(&ds, &layout.clips())?;
            info.insert("n_clips".into(), (ds.len() as i64).into());
        }
        Stage::Diffusion => {
            let ds = load_dataset(&layout.clips())?;
            let schedule = load_schedule(cfg)?;
            let mut model = DiffusionModel::new(cfg.diffusion.model.clone(), derive_seed(seed, 1))?;
            let codec = cfg.diffusion.model.codec.build();
            let data: Vec<TrainExample> = ds
                .iter()
                .map(|s| TrainExample {
                    z0: codec.encode(s.clip.tensor()),
                    caption: s.caption.clone(),
                })
                .collect();
            let early_epoch = cfg.diffusion.early_epoch;
            let early_dir = layout.early_denoiser();
            let mut early_sha = String::new();
            let report = train_denoiser(
                &mut model,
                &data,
                &schedule,
                &cfg.diffusion.train,
                derive_seed(seed, 2),
                &mut |epoch, m, _| {
                    if epoch == early_epoch {
                        early_sha = m.save(&early_dir, epoch_meta(epoch))?;
                    }
                    Ok(())
                },
            )?;
            let sha = model.save(&layout.denoiser(), epoch_meta(cfg.diffusion.train.epochs))?;
            fs::write(
                layout.stage_dir(stage).join("report.json"),
                serde_json::to_string_pretty(&report).expect("report serialises"),
            )?;
            info.insert("final_sha256".into(), sha.into());
            info.insert("early_sha256".into(), early_sha.into());
            info.insert("final_loss".into(), report.final_loss.into());
            info.insert("untrained_probe_loss".into(), report.untrained_probe_loss.into());
            let probe: Vec<toml::Value> = report.probe_losses.iter().map(|&l| l.into()).collect();
            info.insert("probe_losses".into(), probe.into());
        }
        Stage::Flows => {
            let ds = load_dataset(&layout.clips())?;
            let real = collect_real_flows(
                &ds[..cfg.corpus.n_real_clips],
                &cfg.corpus.pairs,
                &cfg.flow,
                derive_seed(seed, 3),
            )?;
            let source = match cfg.corpus.fake_source {
                FakeSource::Early => layout.early_denoiser(),
                FakeSource::Final => layout.denoiser(),
            };
            let (model, _) = DiffusionModel::load(&source)?;
            let schedule = load_schedule(cfg)?;
            let mut fake = FlowCorpus::default();
            for k in 0..cfg.corpus.n_fake_clips {
                let prompt = &ds[k % ds.len()].caption;
                let s = derive_seed(seed, 1000 + k as u64);
                let out = crate::diffusion::sample_baseline(&model, &schedule, &cfg.sampler, prompt, s)?;
                let id = format!("fake_{k:04}");
                fake.items.extend(clip_flows(&out.clip, &id, Label::Fake, &cfg.corpus.pairs, &cfg.flow, s)?);
            }
            let corpus = real.merge(fake);
            corpus.save(&layout.corpus())?;
            info.insert("n_real".into(), (corpus.count(Label::Real) as i64).into());
            info.insert("n_fake".into(), (corpus.count(Label::Fake) as i64).into());
            let src = match cfg.corpus.fake_source {
                FakeSource::Early => "early",
                FakeSource::Final => "final",
            };
            info.insert("fake_source".into(), src.into());
        }
        Stage::Discriminator => {
            let corpus = FlowCorpus::load(&layout.corpus())?;
            let (disc, report) = train_discriminator(
                &corpus,
                &cfg.discriminator.train,
                cfg.discriminator.model.clone(),
                derive_seed(seed, 4),
            )?;
            let sha = disc.save(&layout.discriminator(), toml::Table::new())?;
            fs::write(
                layout.stage_dir(stage).join("report.json"),
                serde_json::to_string_pretty(&report).expect("report serialises"),
            )?;
            info.insert("sha256".into(), sha.into());
            info.insert("best_epoch".into(), (report.best_epoch as i64).into());
            info.insert("best_val_loss".into(), report.best_val_loss.into());
            info.insert("best_val_accuracy".into(), report.best_val_accuracy.into());
        }
        Stage::Samples => {
            let (model, _) = DiffusionModel::load(&layout.denoiser())?;
            let (disc, _) = Discriminator::load(&layout.discriminator())?;
            let schedule = load_schedule(cfg)?;
            let models = Models {
                diffusion: &model,
                schedule: &schedule,
                discriminator: &disc,
                flow: &cfg.flow,
                cfg_scale: cfg.sampler.cfg_scale,
            };
            let prompts = eval_prompts(cfg);
            for &mode in &cfg.eval.modes {
                let mut seconds = 0.0;
                let mut peak = 0usize;
                for (k, prompt) in prompts.iter().enumerate() {
                    for j in 0..cfg.eval.seeds_per_prompt {
                        let s = eval_seed(cfg, k, j);
                        let key = sample_key(k, s);
                        let out = sample_one(mode, &key, prompt, s, &cfg.guidance, &cfg.sampler, &models)?;
                        save_sample(&out, &layout.sample_set(mode).join(&key))?;
                        seconds += out.seconds;
                        peak = peak.max(out.record.peak_graph_bytes);
                    }
                }
                let mut m = toml::Table::new();
                m.insert("seconds".into(), seconds.into());
                m.insert("peak_graph_bytes".into(), (peak as i64).into());
                info.insert(mode.name().into(), m.into());
            }
        }
        Stage::Eval => {
            let (disc, _) = Discriminator::load(&layout.discriminator())?;
            let modes = &cfg.eval.modes;
            let reference = layout.sample_set(modes[0]);
            let candidate = layout.sample_set(*modes.get(1).unwrap_or(&modes[0]));
            let flow_dir = layout.stage_dir(stage).join("flows");
            let report = evaluate(&reference, &candidate, &cfg.flow, Some(&disc), Some(&flow_dir))?;
            fs::write(layout.report(), report.to_json())?;
            info = summary_table(&report);
        }
    }
    Ok(info)
}

fn epoch_meta(epoch: usize) -> toml::Table {
    let mut t = toml::Table::new();
    t.insert("epoch".into(), (epoch as i64).into());
    t
}

/// Headline numbers of a report for the manifest.
pub fn summary_table(r: &MetricReport) -> toml::Table {
    let mut t = toml::Table::new();
    let put = |t: &mut toml::Table, name: &str, v: f64| {
        t.insert(name.into(), v.into());
    };
    put(&mut t, "reference_median_flow_tv", r.reference.flow_tv.median);
    put(&mut t, "candidate_median_flow_tv", r.candidate.flow_tv.median);
    put(&mut t, "reference_median_warping_error", r.reference.warping_error.median);
    put(&mut t, "candidate_median_warping_error", r.candidate.warping_error.median);
    put(&mut t, "reference_mean_flicker", r.reference.flicker.mean);
    put(&mut t, "candidate_mean_flicker", r.candidate.flicker.mean);
    put(&mut t, "reference_mean_disc_score", r.reference.disc_score.mean);
    put(&mut t, "candidate_mean_disc_score", r.candidate.disc_score.mean);
    put(&mut t, "reference_mean_flow_magnitude", r.reference.flow_magnitude.mean);
    put(&mut t, "candidate_mean_flow_magnitude", r.candidate.flow_magnitude.mean);
    put(&mut t, "median_delta_flow_tv", r.paired_summary.flow_tv.median);
    put(&mut t, "median_delta_warping_error", r.paired_summary.warping_error.median);
    t.insert("n_paired".into(), (r.paired.len() as i64).into());
    if let Some(c) = &r.cosine {
        put(&mut t, "cosine_fraction_non_increasing", c.fraction_non_increasing);
        let curve: Vec<toml::Value> = c.curve.iter().map(|&(_, v)| v.into()).collect();
        t.insert("cosine_curve".into(), curve.into());
    }
    t
}

fn build_manifest(cfg: &Config, layout: &RunLayout, stages: Vec<StageRecord>) -> Result<RunManifest> {
    let config = toml::Table::try_from(cfg).map_err(|e| Error::Config(e.to_string()))?;
    let mut seeds = toml::Table::new();
    seeds.insert("master".into(), (cfg.run.seed as i64).into());
    let sample_seeds: Vec<toml::Value> = (0..cfg.eval.n_prompts)
        .flat_map(|k| (0..cfg.eval.seeds_per_prompt).map(move |j| (k, j)))
        .map(|(k, j)| (eval_seed(cfg, k, j) as i64).into())
        .collect();
    seeds.insert("samples".into(), sample_seeds.into());
    let mut checkpoints = toml::Table::new();
    let mut metrics = toml::Table::new();
    let mut artifacts = Vec::new();
    let rel = |p: PathBuf| {
        p.strip_prefix(&layout.root)
            .unwrap_or(&p)
            .to_string_lossy()
            .into_owned()
    };
    for rec in &stages {
        let pick = |k: &str| rec.info.get(k).cloned();
        match rec.stage {
            Stage::Data => artifacts.push(rel(layout.clips())),
            Stage::Diffusion => {
                if let Some(v) = pick("final_sha256") {
                    checkpoints.insert("denoiser".into(), v);
                }
                if let Some(v) = pick("early_sha256") {
                    checkpoints.insert("denoiser_early".into(), v);
                }
                artifacts.push(rel(layout.denoiser()));
                artifacts.push(rel(layout.early_denoiser()));
            }
            Stage::Flows => artifacts.push(rel(layout.corpus())),
            Stage::Discriminator => {
                if let Some(v) = pick("sha256") {
                    checkpoints.insert("discriminator".into(), v);
                }
                artifacts.push(rel(layout.discriminator()));
            }
            Stage::Samples => {
                for &mode in &cfg.eval.modes {
                    artifacts.push(rel(layout.sample_set(mode)));
                }
            }
            Stage::Eval => {
                metrics = rec.info.clone();
                artifacts.push(rel(layout.report()));
            }
        }
    }
    Ok(RunManifest {
        config,
        seeds,
        checkpoints,
        stages,
        metrics,
        artifacts,
    })
}
