//! Which frame pairs a flow is measured on.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairPolicy {
    /// Disjoint `(i, i + 1)` pairs at evenly spaced anchors.
    #[default]
    Adjacent,
    /// Seeded draw of distinct frames, paired in draw order.
    Random,
}

/// `n_decode_frames / 2` frame pairs out of an `n_frames` clip.
pub fn select_frame_pairs(
    n_frames: usize,
    n_decode_frames: usize,
    policy: PairPolicy,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    if n_decode_frames < 2 || !n_decode_frames.is_multiple_of(2) || n_decode_frames > n_frames {
        return Err(Error::InvalidArgument(format!(
            "n_decode_frames must be even, >= 2 and <= {n_frames}; got {n_decode_frames}"
        )));
    }
    let k = n_decode_frames / 2;
    Ok(match policy {
        PairPolicy::Adjacent => (0..k)
            .map(|j| {
                let anchor = ((2 * j + 1) * n_frames) / (2 * k) - 1;
                (anchor, anchor + 1)
            })
            .collect(),
        PairPolicy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let picks = sample(&mut rng, n_frames, n_decode_frames).into_vec();
            picks
                .chunks(2)
                .map(|p| (p[0].min(p[1]), p[0].max(p[1])))
                .collect()
        }
    })
}

/// All `N - 1` consecutive pairs; used by the evaluation metrics.
pub fn all_adjacent_pairs(n_frames: usize) -> Vec<(usize, usize)> {
    (0..n_frames.saturating_sub(1)).map(|i| (i, i + 1)).collect()
}
