//! One directory per sampled clip: PNG frames, a GIF preview, `sample.toml`
//! and, for guided runs, `trace.jsonl`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::SampleMode;
use crate::diffusion::{sample_baseline, SamplerConfig};
use crate::error::{Error, Result};
use crate::guidance::{sample_dps, sample_motionprompt, GuidanceConfig, GuidanceTrace, Models};
use crate::video::VideoClip;
use crate::vocab::CaptionTokens;

pub const RECORD_FILE: &str = "sample.toml";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const PREVIEW_FILE: &str = "preview.gif";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub key: String,
    pub mode: SampleMode,
    pub prompt: String,
    pub seed: u64,
    pub n_frames: usize,
    /// Hash of `z_T`; paired comparisons require it to match.
    pub noise_hash: String,
    pub cond_hashes: Vec<String>,
    /// Largest tape held by one guidance gradient, in bytes; 0 for the baseline.
    pub peak_graph_bytes: usize,
}

/// Directory name shared by every mode for one (prompt, seed).
pub fn sample_key(prompt_index: usize, seed: u64) -> String {
    format!("p{prompt_index:02}_s{seed}")
}

pub struct Sampled {
    pub record: SampleRecord,
    pub clip: VideoClip,
    pub trace: Option<GuidanceTrace>,
    pub seconds: f64,
}

/// Runs one sampler. Guided modes need `models.discriminator` to be trained.
pub fn sample_one(
    mode: SampleMode,
    key: &str,
    prompt: &CaptionTokens,
    seed: u64,
    gcfg: &GuidanceConfig,
    scfg: &SamplerConfig,
    models: &Models,
) -> Result<Sampled> {
    let start = Instant::now();
    let (out, trace, peak) = match mode {
        SampleMode::Baseline => {
            let out = sample_baseline(models.diffusion, models.schedule, scfg, prompt, seed)?;
            (out, None, 0)
        }
        SampleMode::MotionPrompt => {
            let g = sample_motionprompt(prompt, seed, gcfg, scfg, models)?;
            let peak = g.trace.records.iter().map(|r| r.graph_bytes).max().unwrap_or(0);
            (g.output, Some(g.trace), peak)
        }
        SampleMode::Dps => {
            let (out, steps) = sample_dps(prompt, seed, gcfg, scfg, models)?;
            let peak = steps.iter().map(|s| s.graph_bytes).max().unwrap_or(0);
            (out, None, peak)
        }
    };
    Ok(Sampled {
        record: SampleRecord {
            key: key.to_string(),
            mode,
            prompt: prompt.text(),
            seed,
            n_frames: out.clip.n_frames(),
            noise_hash: out.noise_hash,
            cond_hashes: out.cond_hashes,
            peak_graph_bytes: peak,
        },
        clip: out.clip,
        trace,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn save_sample(s: &Sampled, dir: &Path) -> Result<()> {
    s.clip.save_pngs(dir)?;
    s.clip.save_gif(&dir.join(PREVIEW_FILE))?;
    let text = toml::to_string(&s.record).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join(RECORD_FILE), text)?;
    if let Some(trace) = &s.trace {
        fs::write(dir.join(TRACE_FILE), trace.to_json_lines())?;
    }
    Ok(())
}

pub struct StoredSample {
    pub dir: PathBuf,
    pub record: SampleRecord,
    pub clip: VideoClip,
    pub trace: Option<GuidanceTrace>,
}

pub fn load_sample(dir: &Path) -> Result<StoredSample> {
    let path = dir.join(RECORD_FILE);
    let text = fs::read_to_string(&path)?;
    let record: SampleRecord = toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let clip = VideoClip::load_pngs(dir, record.n_frames)?;
    let trace_path = dir.join(TRACE_FILE);
    let trace = if trace_path.exists() {
        let mut records = Vec::new();
        for (n, line) in fs::read_to_string(&trace_path)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r = serde_json::from_str(line)
                .map_err(|e| Error::format(&trace_path, format!("line {}: {e}", n + 1)))?;
            records.push(r);
        }
        Some(GuidanceTrace { records })
    } else {
        None
    };
    Ok(StoredSample {
        dir: dir.to_path_buf(),
        record,
        clip,
        trace,
    })
}

/// Every sample directory directly under `set_dir`, sorted by key.
pub fn load_sample_set(set_dir: &Path) -> Result<Vec<StoredSample>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(set_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join(RECORD_FILE).is_file())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_sample(d)).collect()
}
