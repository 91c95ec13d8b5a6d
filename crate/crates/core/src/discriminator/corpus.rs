//! Labelled flow collections and their on-disk form (`.flo` files plus `index.toml`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{sample_baseline, DiffusionModel, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::flow::{estimate_flow, read_flo, write_flo, FlowField, FlowParams};
use crate::pairs::{select_frame_pairs, PairPolicy};
use crate::synth::Sample;
use crate::video::VideoClip;
use crate::vocab::CaptionTokens;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn target(self) -> f64 {
        match self {
            Label::Real => 1.0,
            Label::Fake => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub clip_id: String,
    pub frames: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowItem {
    pub flow: FlowField,
    pub label: Label,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlowCorpus {
    pub items: Vec<FlowItem>,
}

/// How frame pairs are drawn from each clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairSpec {
    pub pairs_per_clip: usize,
    pub policy: PairPolicy,
}

impl Default for PairSpec {
    fn default() -> Self {
        Self {
            pairs_per_clip: 3,
            policy: PairPolicy::Adjacent,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexEntry {
    file: String,
    label: Label,
    clip_id: String,
    frames: (usize, usize),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    entries: Vec<IndexEntry>,
}

const INDEX_FILE: &str = "index.toml";

impl FlowCorpus {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.items.iter().filter(|i| i.label == label).count()
    }

    pub fn merge(mut self, other: FlowCorpus) -> Self {
        self.items.extend(other.items);
        self
    }

    /// Spatial shape shared by every flow.
    pub fn flow_shape(&self) -> Result<(usize, usize)> {
        let first = self
            .items
            .first()
            .ok_or_else(|| Error::InvalidArgument("flow corpus is empty".into()))?;
        let hw = (first.flow.height(), first.flow.width());
        if self.items.iter().any(|i| (i.flow.height(), i.flow.width()) != hw) {
            return Err(Error::Shape("flows in the corpus differ in size".into()));
        }
        Ok(hw)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.items.len());
        for (k, item) in self.items.iter().enumerate() {
            let file = format!("flow_{k:05}.flo");
            write_flo(&item.flow, dir.join(&file))?;
            entries.push(IndexEntry {
                file,
                label: item.label,
                clip_id: item.provenance.clip_id.clone(),
                frames: item.provenance.frames,
            });
        }
        let text = toml::to_string(&Index { entries }).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(dir.join(INDEX_FILE), text)?;
        Ok(())
    }

    /// Flows come back at f32 precision, as stored.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&path)?;
        let index: Index = toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let items = index
            .entries
            .into_iter()
            .map(|e| {
                Ok(FlowItem {
                    flow: read_flo(dir.join(&e.file))?,
                    label: e.label,
                    provenance: Provenance {
                        clip_id: e.clip_id,
                        frames: e.frames,
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { items })
    }
}

/// Flows of one clip on the pairs chosen by `pairs`. Real and generated clips
/// both go through here, so extraction is identical for the two classes.
pub fn clip_flows(
    clip: &VideoClip,
    clip_id: &str,
    label: Label,
    pairs: &PairSpec,
    params: &FlowParams,
    seed: u64,
) -> Result<Vec<FlowItem>> {
    let chosen = select_frame_pairs(clip.n_frames(), 2 * pairs.pairs_per_clip, pairs.policy, seed)?;
    chosen
        .into_iter()
        .map(|(i, j)| {
            Ok(FlowItem {
                flow: estimate_flow(&clip.frame(i), &clip.frame(j), params)?,
                label,
                provenance: Provenance {
                    clip_id: clip_id.to_string(),
                    frames: (i, j),
                },
            })
        })
        .collect()
}

pub fn collect_real_flows(
    dataset: &[Sample],
    pairs: &PairSpec,
    params: &FlowParams,
    seed: u64,
) -> Result<FlowCorpus> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let mut items = Vec::new();
    for (k, s) in dataset.iter().enumerate() {
        let id = format!("real_{k:04}");
        items.extend(clip_flows(&s.clip, &id, Label::Real, pairs, params, seed ^ s.clip_seed)?);
    }
    Ok(FlowCorpus { items })
}

/// Samples one clip per `(prompt, seed)` with the baseline sampler and
/// extracts flows exactly as [`collect_real_flows`] does.
pub fn collect_fake_flows(
    model: &DiffusionModel,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    prompts: &[CaptionTokens],
    seeds: &[u64],
    pairs: &PairSpec,
    params: &FlowParams,
) -> Result<FlowCorpus> {
    let mut items = Vec::new();
    for (p, prompt) in prompts.iter().enumerate() {
        for &seed in seeds {
            let out = sample_baseline(model, schedule, sampler, prompt, seed)?;
            let id = format!("fake_{p:04}_s{seed}");
            items.extend(clip_flows(&out.clip, &id, Label::Fake, pairs, params, seed)?);
        }
    }
    Ok(FlowCorpus { items })
}
