//! Modality subsets and the missing-modality protocol.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::rng;

/// A non-empty subset of `{1..=S}` stored as a bitmask (bit `k-1` = modality `k`).
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Subset(u32);

pub const MAX_MODALITIES: usize = 16;

impl Subset {
    pub fn from_bits(bits: u32) -> Option<Self> {
        (bits != 0).then_some(Subset(bits))
    }

    pub fn from_ids(ids: &[usize]) -> Option<Self> {
        let mut bits = 0u32;
        for &id in ids {
            if id == 0 || id > MAX_MODALITIES {
                return None;
            }
            bits |= 1 << (id - 1);
        }
        Self::from_bits(bits)
    }

    pub fn full(total: usize) -> Self {
        Subset((1u32 << total) - 1)
    }

    pub fn bits(self) -> u32 {
        self.0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn contains(self, id: usize) -> bool {
        (1..=MAX_MODALITIES).contains(&id) && self.0 & (1 << (id - 1)) != 0
    }

    /// Ascending modality ids.
    pub fn ids(self) -> Vec<usize> {
        (1..=MAX_MODALITIES).filter(|&k| self.contains(k)).collect()
    }

    /// Highest id present; must not exceed the dataset's `S`.
    pub fn max_id(self) -> usize {
        32 - self.0.leading_zeros() as usize
    }

    /// Presence indicators for modalities `1..=total`.
    pub fn indicators(self, total: usize) -> Vec<bool> {
        (1..=total).map(|k| self.contains(k)).collect()
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ids: Vec<String> = self.ids().iter().map(ToString::to_string).collect();
        write!(f, "{{{}}}", ids.join(","))
    }
}

impl fmt::Debug for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// All `2^S - 1` non-empty subsets, ordered by cardinality and then
/// lexicographically by ids: singletons first, the full set last.
pub fn all_subsets(total: usize) -> Vec<Subset> {
    assert!((1..=MAX_MODALITIES).contains(&total), "S must be in 1..={MAX_MODALITIES}");
    let mut out: Vec<Subset> = (1..1u32 << total).map(Subset).collect();
    out.sort_by_key(|s| (s.len(), s.ids()));
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingProtocol {
    /// Each training sample keeps one subset for the whole run.
    #[default]
    FixedPerSample,
    /// Each sample draws a fresh subset every epoch.
    ResampleEachEpoch,
    /// Every modality is always present.
    Full,
}

/// Uniform draw over the `2^S - 1` non-empty subsets.
pub fn sample_missing_mask(total: usize, rng: &mut impl Rng) -> Subset {
    Subset(rng.random_range(1..1u32 << total))
}

/// Subset assigned to a training sample; a pure function of its arguments.
pub fn mask_for_sample(protocol: MissingProtocol, total: usize, seed: u64, sample: usize, epoch: usize) -> Subset {
    match protocol {
        MissingProtocol::Full => Subset::full(total),
        MissingProtocol::FixedPerSample => sample_missing_mask(total, &mut rng::indexed(seed, "masks", sample as u64)),
        MissingProtocol::ResampleEachEpoch => {
            let key = ((epoch as u64) << 32) ^ sample as u64;
            sample_missing_mask(total, &mut rng::indexed(seed, "masks.epoch", key))
        }
    }
}
