//! Synthetic multimodal classification tasks.
//!
//! Every modality `k` gets a fixed signature pattern `E_k` (so its tokens are
//! recognisable) on top of the label-bearing signal:
//!
//! * `redundant`: `x_k = Q_y + 0.5·E_k + noise`; any one modality suffices.
//! * `complementary`: `x_k = u_k·D_k + 0.5·E_k + noise` with latent
//!   `u_k ~ N(0, 1)` and label `[Σ_k u_k > 0]`; each modality holds partial
//!   evidence.
//! * `xor_pair`: modalities pair up as (1,2), (3,4), ...; each carries a bit
//!   `b_k = ±1`, the label is the shared parity `b_1·b_2 = b_3·b_4 = ...`, and
//!   modality `k` only writes to its own contiguous block of voxels. Any single
//!   modality is independent of the label; a complete pair determines it, but
//!   only through a cross-modal product that a voxelwise fuser followed by a
//!   linear head cannot represent.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::optim::{adam_step, AdamConfig, AdamState};
use super::rng;
use crate::error::{Error, Result};
use crate::fusion::ModalitySet;
use crate::nn::{Linear, Params};
use crate::tensor::io::Archive;
use crate::tensor::{numel, Real, Tape, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMode {
    #[default]
    Redundant,
    Complementary,
    XorPair,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes { train: 512, val: 256, test: 512 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    /// Total modality count `S`.
    pub modalities: usize,
    pub channels: usize,
    pub feature_shape: Vec<usize>,
    pub num_classes: usize,
    pub samples: SplitSizes,
    pub noise_std: f64,
    pub correlation_mode: CorrelationMode,
    /// Data seed; derived from the experiment seed when absent.
    pub seed: Option<u64>,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            modalities: 4,
            channels: 16,
            feature_shape: vec![8],
            num_classes: 2,
            samples: SplitSizes::default(),
            noise_std: 0.1,
            correlation_mode: CorrelationMode::Redundant,
            seed: None,
        }
    }
}

fn spec_error(field: &str, msg: impl Into<String>) -> Error {
    Error::Config { path: format!("task.{field}"), msg: msg.into() }
}

impl SyntheticTaskSpec {
    pub fn voxels(&self) -> usize {
        numel(&self.feature_shape)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=super::masks::MAX_MODALITIES).contains(&self.modalities) {
            return Err(spec_error("modalities", "must be in 1..=16"));
        }
        if self.channels == 0 {
            return Err(spec_error("channels", "must be positive"));
        }
        if self.feature_shape.is_empty() || self.voxels() == 0 {
            return Err(spec_error("feature_shape", "needs at least one positive extent"));
        }
        if self.num_classes < 2 {
            return Err(spec_error("num_classes", "must be at least 2"));
        }
        let s = self.samples;
        if s.train == 0 || s.val == 0 || s.test == 0 {
            return Err(spec_error("samples", "every split needs at least one sample"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(spec_error("noise_std", "must be finite and non-negative"));
        }
        match self.correlation_mode {
            CorrelationMode::Redundant => {}
            CorrelationMode::Complementary | CorrelationMode::XorPair if self.num_classes != 2 => {
                return Err(spec_error("num_classes", "this correlation mode is binary"));
            }
            CorrelationMode::Complementary => {}
            CorrelationMode::XorPair => {
                if self.modalities < 2 || !self.modalities.is_multiple_of(2) {
                    return Err(spec_error("modalities", "xor_pair needs an even count ≥ 2"));
                }
                if self.voxels() < self.modalities {
                    return Err(spec_error("feature_shape", "xor_pair needs at least one voxel per modality"));
                }
            }
        }
        Ok(())
    }
}

/// One split: per-modality features `[N, C, R_f...]` stored flat, plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub features: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub feature_shape: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn modalities(&self) -> usize {
        self.features.len()
    }

    fn sample_len(&self) -> usize {
        self.channels * numel(&self.feature_shape)
    }

    /// Gathers rows into a [`ModalitySet`] holding only modalities `ids`.
    pub fn batch<T: Real>(&self, ids: &[usize], rows: &[usize]) -> Result<ModalitySet<T>> {
        let per = self.sample_len();
        let mut shape = vec![rows.len(), self.channels];
        shape.extend_from_slice(&self.feature_shape);
        let entries = ids
            .iter()
            .map(|&id| {
                let src = self
                    .features
                    .get(id.wrapping_sub(1))
                    .ok_or(Error::ModalityOutOfRange { id, max: self.modalities() })?;
                let mut data = Vec::with_capacity(rows.len() * per);
                for &r in rows {
                    data.extend(src[r * per..(r + 1) * per].iter().map(|&x| T::of(x as f64)));
                }
                Ok((id, Tensor::new(&shape, data)?))
            })
            .collect::<Result<Vec<_>>>()?;
        ModalitySet::new(self.modalities(), entries)
    }

    pub fn labels_of(&self, rows: &[usize]) -> Vec<usize> {
        rows.iter().map(|&r| self.labels[r]).collect()
    }

    pub fn to_archive(&self, meta: impl Into<String>) -> Archive {
        let mut a = Archive::new(meta);
        let mut shape = vec![self.len(), self.channels];
        shape.extend_from_slice(&self.feature_shape);
        for (k, f) in self.features.iter().enumerate() {
            a.push(format!("modality.{}", k + 1), &Tensor::from_parts(&shape, f.clone()));
        }
        let labels: Vec<f32> = self.labels.iter().map(|&y| y as f32).collect();
        a.push("labels", &Tensor::from_parts(&[self.len()], labels));
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let labels = a.require::<f32>("labels")?;
        let labels: Vec<usize> = labels.data().iter().map(|&y| y as usize).collect();
        let mut features = Vec::new();
        let mut shape: Option<Vec<usize>> = None;
        while let Some(t) = a.get(&format!("modality.{}", features.len() + 1)) {
            if t.rank() < 3 || t.shape()[0] != labels.len() {
                return Err(Error::Format(format!("modality tensor has shape {:?}", t.shape())));
            }
            if shape.as_deref().is_some_and(|s| s != t.shape()) {
                return Err(Error::Format("modality tensors disagree in shape".into()));
            }
            shape = Some(t.shape().to_vec());
            features.push(t.to_vec());
        }
        let shape = shape.ok_or_else(|| Error::Format("cache holds no modalities".into()))?;
        Ok(Split { features, labels, channels: shape[1], feature_shape: shape[2..].to_vec() })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticTaskSpec,
    pub train: Split,
    pub val: Split,
    pub test: Split,
    /// Validation accuracy of a linear probe fitted to each modality alone.
    pub probe_accuracy: Vec<f64>,
}

const SPLITS: [&str; 3] = ["train", "val", "test"];

impl Dataset {
    pub fn split(&self, name: &str) -> Option<&Split> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    /// Writes `train.tfmf`, `val.tfmf`, `test.tfmf` into `dir`.
    pub fn save_cache(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let meta = serde_json::to_string(&self.spec)?;
        for name in SPLITS {
            let split = self.split(name).expect("known split");
            split.to_archive(meta.clone()).save(dir.join(format!("{name}.tfmf")))?;
        }
        Ok(())
    }

    pub fn load_cache(dir: &Path) -> Result<Self> {
        let mut parts = Vec::new();
        let mut spec = None;
        for name in SPLITS {
            let a = Archive::load(dir.join(format!("{name}.tfmf")))?;
            spec = Some(serde_json::from_str::<SyntheticTaskSpec>(&a.meta)?);
            parts.push(Split::from_archive(&a)?);
        }
        let test = parts.pop().expect("three splits");
        let val = parts.pop().expect("three splits");
        let train = parts.pop().expect("three splits");
        let probe_accuracy = (1..=train.modalities()).map(|k| linear_probe(&train, &val, k)).collect();
        Ok(Dataset { spec: spec.expect("three splits"), train, val, test, probe_accuracy })
    }
}

fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

struct Patterns {
    signature: Vec<Vec<f64>>,
    signal: Vec<Vec<f64>>,
    prototypes: Vec<Vec<f64>>,
}

fn draw_split(spec: &SyntheticTaskSpec, pat: &Patterns, rng: &mut impl Rng, n: usize) -> Split {
    let s = spec.modalities;
    let (c, r) = (spec.channels, spec.voxels());
    let per = c * r;
    let mut features = vec![Vec::with_capacity(n * per); s];
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let (label, coeffs) = match spec.correlation_mode {
            CorrelationMode::Redundant => (rng.random_range(0..spec.num_classes), vec![0.0; s]),
            CorrelationMode::Complementary => {
                let u: Vec<f64> = normal_vec(rng, s);
                (usize::from(u.iter().sum::<f64>() > 0.0), u)
            }
            CorrelationMode::XorPair => {
                let y = rng.random_range(0..2usize);
                let parity = if y == 1 { 1.0 } else { -1.0 };
                let mut bits = vec![0.0; s];
                for pair in 0..s / 2 {
                    let b: f64 = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    bits[2 * pair] = b;
                    bits[2 * pair + 1] = parity * b;
                }
                (y, bits)
            }
        };
        labels.push(label);
        for k in 0..s {
            for j in 0..per {
                let v = j % r;
                let clean = match spec.correlation_mode {
                    CorrelationMode::Redundant => pat.prototypes[label][j] + 0.5 * pat.signature[k][j],
                    CorrelationMode::Complementary => coeffs[k] * pat.signal[k][j] + 0.5 * pat.signature[k][j],
                    CorrelationMode::XorPair if v * s / r == k => {
                        coeffs[k] * pat.signal[k][j] + 0.5 * pat.signature[k][j]
                    }
                    CorrelationMode::XorPair => 0.0,
                };
                let noise =
                    if spec.noise_std > 0.0 { spec.noise_std * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
                features[k].push((clean + noise) as f32);
            }
        }
    }
    Split { features, labels, channels: c, feature_shape: spec.feature_shape.clone() }
}

/// Deterministic given `spec.seed` (which must be set).
///
/// In `complementary` and `xor_pair` modes, generation fails if any single
/// modality lets a linear probe reach 0.99 validation accuracy.
pub fn generate_dataset(spec: &SyntheticTaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let seed = spec.seed.ok_or_else(|| spec_error("seed", "unresolved; derive it from the experiment seed"))?;
    let per = spec.channels * spec.voxels();
    let mut prng = rng::stream(seed, "data.patterns");
    let pat = Patterns {
        signature: (0..spec.modalities).map(|_| normal_vec(&mut prng, per)).collect(),
        signal: (0..spec.modalities).map(|_| normal_vec(&mut prng, per)).collect(),
        prototypes: (0..spec.num_classes).map(|_| normal_vec(&mut prng, per)).collect(),
    };
    let sizes = [spec.samples.train, spec.samples.val, spec.samples.test];
    let mut splits = SPLITS
        .iter()
        .zip(sizes)
        .map(|(name, n)| draw_split(spec, &pat, &mut rng::stream(seed, &format!("data.{name}")), n))
        .collect::<Vec<_>>();
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    let probe_accuracy: Vec<f64> = (1..=spec.modalities).map(|k| linear_probe(&train, &val, k)).collect();
    if spec.correlation_mode != CorrelationMode::Redundant {
        if let Some((k, acc)) = probe_accuracy.iter().enumerate().find(|(_, &a)| a >= 0.99) {
            return Err(spec_error(
                "correlation_mode",
                format!("modality {} alone reaches probe accuracy {acc:.3}; the task is not multimodal", k + 1),
            ));
        }
    }
    Ok(Dataset { spec: spec.clone(), train, val, test, probe_accuracy })
}

const PROBE_STEPS: u64 = 300;
const PROBE_LR: f64 = 0.05;

/// Multinomial logistic regression on modality `k` alone: full-batch Adam on
/// `train`, accuracy on `held_out`.
pub fn linear_probe(train: &Split, held_out: &Split, k: usize) -> f64 {
    let classes = train.labels.iter().chain(&held_out.labels).max().map_or(2, |&m| m + 1).max(2);
    let per = train.sample_len();
    let matrix = |s: &Split| {
        let data: Vec<f64> = s.features[k - 1].iter().map(|&x| x as f64).collect();
        Tensor::from_parts(&[s.len(), per], data)
    };
    let (x, xv) = (matrix(train), matrix(held_out));
    let mut lin = Linear::<f64>::zeros(per, classes);
    let mut state = AdamState::zeros_like(&lin);
    for t in 1..=PROBE_STEPS {
        let tape = Tape::new();
        let bound = lin.bind(&tape);
        let grads = bound
            .forward(&tape, &x)
            .and_then(|logits| tape.cross_entropy(&logits, &train.labels))
            .and_then(|loss| tape.backward(&loss))
            .and_then(|g| Ok(vec![g.wrt(&bound.weight)?, g.wrt(&bound.bias)?]));
        let Ok(grads) = grads else { break };
        if adam_step(&mut lin, &grads, &mut state, &AdamConfig::default(), PROBE_LR, t).is_err() {
            break;
        }
    }
    let logits = lin.forward(&Tape::new(), &xv).expect("probe shapes agree");
    let correct = logits.data().chunks(classes).zip(&held_out.labels).filter(|(row, &y)| argmax(row) == y).count();
    correct as f64 / held_out.len() as f64
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(mode: CorrelationMode, noise: f64) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            correlation_mode: mode,
            noise_std: noise,
            samples: SplitSizes { train: 128, val: 64, test: 32 },
            seed: Some(11),
            ..SyntheticTaskSpec::default()
        }
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        let mut s = spec(CorrelationMode::Redundant, 0.0);
        s.samples.train = 0;
        assert!(generate_dataset(&s).is_err());
        let mut s = spec(CorrelationMode::XorPair, 0.0);
        s.modalities = 3;
        assert!(generate_dataset(&s).is_err());
        let mut s = spec(CorrelationMode::Complementary, 0.0);
        s.num_classes = 3;
        assert!(generate_dataset(&s).is_err());
        let mut s = spec(CorrelationMode::Redundant, 0.0);
        s.seed = None;
        assert!(generate_dataset(&s).is_err());
    }

    #[test]
    fn single_modality_complementary_task_fails_probe_check() {
        let mut s = spec(CorrelationMode::Complementary, 0.0);
        s.modalities = 1;
        let err = generate_dataset(&s).unwrap_err();
        assert!(err.to_string().contains("probe"), "{err}");
    }

    #[test]
    fn xor_support_is_disjoint() {
        let d = generate_dataset(&spec(CorrelationMode::XorPair, 0.0)).unwrap();
        let (c, r) = (16, 8);
        for k in 0..4 {
            for j in 0..c * r {
                let owner = (j % r) * 4 / r;
                let x = d.train.features[k][j];
                assert_eq!(x != 0.0, owner == k, "modality {k} element {j}");
            }
        }
    }

    #[test]
    fn batch_gathers_requested_rows_and_modalities() {
        let d = generate_dataset(&spec(CorrelationMode::Redundant, 0.3)).unwrap();
        let set: ModalitySet<f32> = d.test.batch(&[2, 4], &[5, 0]).unwrap();
        assert_eq!(set.ids(), [2, 4]);
        assert_eq!(set.shape(), &[2, 16, 8]);
        assert_eq!(set.get(4).unwrap().data()[128], d.test.features[3][0]);
        assert!(d.test.batch::<f32>(&[5], &[0]).is_err());
        assert_eq!(d.test.labels_of(&[5, 0]), [d.test.labels[5], d.test.labels[0]]);
    }

    #[test]
    fn cache_roundtrip() {
        let d = generate_dataset(&spec(CorrelationMode::Complementary, 0.5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save_cache(dir.path()).unwrap();
        assert_eq!(Dataset::load_cache(dir.path()).unwrap(), d);
    }

    #[test]
    fn argmax_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0]), 0);
    }
}
