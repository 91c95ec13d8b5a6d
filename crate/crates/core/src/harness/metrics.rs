//! Temporal-quality proxies and paired baseline-vs-candidate evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::samples::{load_sample_set, StoredSample};
use crate::discriminator::{sigmoid, Discriminator};
use crate::error::Result;
use crate::flow::{estimate_flow, photometric_error, save_flow_png, tv_loss, FlowField, FlowParams};
use crate::guidance::GuidanceTrace;
use crate::pairs::all_adjacent_pairs;
use crate::video::VideoClip;

/// Slack for float noise when checking that the cosine curve never rises.
pub const COSINE_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub key: String,
    /// Photometric error of frame `i` against frame `i + 1` warped by the estimated flow.
    pub warping_error: f64,
    pub flicker: f64,
    pub flow_tv: f64,
    /// Mean discriminator probability of "real"; absent without a discriminator.
    pub disc_score: Option<f64>,
    pub flow_magnitude: f64,
}

/// Metrics over all adjacent pairs of `clip`, plus the flows themselves.
pub fn clip_metrics(
    key: &str,
    clip: &VideoClip,
    params: &FlowParams,
    disc: Option<&Discriminator>,
) -> Result<(ClipMetrics, Vec<FlowField>)> {
    let pairs = all_adjacent_pairs(clip.n_frames());
    let mut flows = Vec::with_capacity(pairs.len());
    let (mut we, mut tv, mut mag) = (0.0, 0.0, 0.0);
    for &(a, b) in &pairs {
        let (fa, fb) = (clip.frame(a), clip.frame(b));
        let f = estimate_flow(&fa, &fb, params)?;
        we += photometric_error(&fa, &fb, &f)?;
        tv += tv_loss(&f);
        mag += f.mean_magnitude();
        flows.push(f);
    }
    let n = pairs.len().max(1) as f64;
    let disc_score = match disc {
        Some(d) => {
            let refs: Vec<&FlowField> = flows.iter().collect();
            let logits = d.logits(&refs)?;
            Some(logits.iter().map(|&l| sigmoid(l)).sum::<f64>() / n)
        }
        None => None,
    };
    Ok((
        ClipMetrics {
            key: key.to_string(),
            warping_error: we / n,
            flicker: clip.flicker(),
            flow_tv: tv / n,
            disc_score,
            flow_magnitude: mag / n,
        },
        flows,
    ))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.total_cmp(b));
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        Self {
            count: n,
            mean: v.iter().sum::<f64>() / n as f64,
            median,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SetSummary {
    pub n_clips: usize,
    pub warping_error: Stat,
    pub flicker: Stat,
    pub flow_tv: Stat,
    pub disc_score: Stat,
    pub flow_magnitude: Stat,
}

impl SetSummary {
    pub fn of(clips: &[ClipMetrics]) -> Self {
        let col = |f: &dyn Fn(&ClipMetrics) -> Option<f64>| Stat::of(&clips.iter().filter_map(f).collect::<Vec<_>>());
        Self {
            n_clips: clips.len(),
            warping_error: col(&|c| Some(c.warping_error)),
            flicker: col(&|c| Some(c.flicker)),
            flow_tv: col(&|c| Some(c.flow_tv)),
            disc_score: col(&|c| c.disc_score),
            flow_magnitude: col(&|c| Some(c.flow_magnitude)),
        }
    }
}

/// Candidate minus reference for one (prompt, seed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDelta {
    pub key: String,
    pub warping_error: f64,
    pub flicker: f64,
    pub flow_tv: f64,
    pub disc_score: Option<f64>,
    pub flow_magnitude: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CosineSummary {
    /// Mean token-averaged cosine with the initial tokens at each optimised step.
    pub curve: Vec<(usize, f64)>,
    pub n_runs: usize,
    pub n_non_increasing: usize,
    pub fraction_non_increasing: f64,
}

impl CosineSummary {
    pub fn of(traces: &[&GuidanceTrace]) -> Option<Self> {
        if traces.is_empty() {
            return None;
        }
        let mut by_step: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut n_non_increasing = 0;
        for t in traces {
            let curve = t.cosine_curve();
            if curve.windows(2).all(|w| w[1].1 <= w[0].1 + COSINE_TOLERANCE) {
                n_non_increasing += 1;
            }
            for (s, c) in curve {
                by_step.entry(s).or_default().push(c);
            }
        }
        Some(Self {
            curve: by_step
                .into_iter()
                .map(|(s, v)| (s, v.iter().sum::<f64>() / v.len() as f64))
                .collect(),
            n_runs: traces.len(),
            n_non_increasing,
            fraction_non_increasing: n_non_increasing as f64 / traces.len() as f64,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub reference: SetSummary,
    pub candidate: SetSummary,
    pub reference_clips: Vec<ClipMetrics>,
    pub candidate_clips: Vec<ClipMetrics>,
    pub paired: Vec<PairDelta>,
    pub paired_summary: SetSummary,
    /// Keys left out of the paired statistics, with the reason.
    pub unpaired: Vec<String>,
    pub cosine: Option<CosineSummary>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

fn measure(
    set: &[StoredSample],
    params: &FlowParams,
    disc: Option<&Discriminator>,
    flow_dir: Option<&Path>,
    label: &str,
) -> Result<Vec<ClipMetrics>> {
    set.iter()
        .map(|s| {
            let (m, flows) = clip_metrics(&s.record.key, &s.clip, params, disc)?;
            if let Some(dir) = flow_dir {
                let center = &flows[flows.len() / 2];
                save_flow_png(center, None, dir.join(format!("{label}_{}.png", s.record.key)))?;
            }
            Ok(m)
        })
        .collect()
}

/// Scores two sample sets and pairs them by key. A pair counts only when
/// both members exist and were drawn from the same initial noise.
pub fn evaluate(
    reference: &Path,
    candidate: &Path,
    params: &FlowParams,
    disc: Option<&Discriminator>,
    flow_dir: Option<&Path>,
) -> Result<MetricReport> {
    if let Some(dir) = flow_dir {
        fs::create_dir_all(dir)?;
    }
    let ref_set = load_sample_set(reference)?;
    let cand_set = load_sample_set(candidate)?;
    let ref_m = measure(&ref_set, params, disc, flow_dir, "reference")?;
    let cand_m = measure(&cand_set, params, disc, flow_dir, "candidate")?;

    let ref_by_key: BTreeMap<&str, (&StoredSample, &ClipMetrics)> = ref_set
        .iter()
        .zip(&ref_m)
        .map(|(s, m)| (s.record.key.as_str(), (s, m)))
        .collect();
    let mut paired = Vec::new();
    let mut unpaired = Vec::new();
    let mut seen = Vec::new();
    for (s, m) in cand_set.iter().zip(&cand_m) {
        let key = s.record.key.as_str();
        seen.push(key);
        let Some((rs, rm)) = ref_by_key.get(key) else {
            unpaired.push(format!("{key}: missing from reference"));
            continue;
        };
        if rs.record.noise_hash != s.record.noise_hash {
            unpaired.push(format!("{key}: initial noise differs"));
            continue;
        }
        paired.push(PairDelta {
            key: key.to_string(),
            warping_error: m.warping_error - rm.warping_error,
            flicker: m.flicker - rm.flicker,
            flow_tv: m.flow_tv - rm.flow_tv,
            disc_score: m.disc_score.zip(rm.disc_score).map(|(a, b)| a - b),
            flow_magnitude: m.flow_magnitude - rm.flow_magnitude,
        });
    }
    for key in ref_by_key.keys() {
        if !seen.contains(key) {
            unpaired.push(format!("{key}: missing from candidate"));
        }
    }
    let as_metrics: Vec<ClipMetrics> = paired
        .iter()
        .map(|d| ClipMetrics {
            key: d.key.clone(),
            warping_error: d.warping_error,
            flicker: d.flicker,
            flow_tv: d.flow_tv,
            disc_score: d.disc_score,
            flow_magnitude: d.flow_magnitude,
        })
        .collect();
    let traces: Vec<&GuidanceTrace> = cand_set.iter().filter_map(|s| s.trace.as_ref()).collect();
    Ok(MetricReport {
        reference: SetSummary::of(&ref_m),
        candidate: SetSummary::of(&cand_m),
        paired_summary: SetSummary::of(&as_metrics),
        reference_clips: ref_m,
        candidate_clips: cand_m,
        paired,
        unpaired,
        cosine: CosineSummary::of(&traces),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn still_clip_scores_zero() {
        let frame = Tensor::from_parts(&[3, 8, 8], (0..192).map(|i| (i % 7) as f64 / 7.0).collect());
        let clip = VideoClip::new(Tensor::stack(&[frame.clone(), frame.clone(), frame]).unwrap()).unwrap();
        let (m, _) = clip_metrics("x", &clip, &FlowParams::default(), None).unwrap();
        assert_eq!(m.flicker, 0.0);
        assert_eq!(m.warping_error, 0.0);
        assert_eq!(m.flow_tv, 0.0);
    }

    #[test]
    fn stat_median() {
        let s = Stat::of(&[3.0, 1.0, 2.0, 10.0]);
        assert_eq!((s.count, s.median, s.mean), (4, 2.5, 4.0));
        assert_eq!(Stat::of(&[5.0, 1.0, 3.0]).median, 3.0);
    }
}
