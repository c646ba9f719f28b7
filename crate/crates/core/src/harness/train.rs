//! Single-threaded training loop with resumable, seed-determined batches.
//!
//! Every batch shares one modality subset. The batch taken at step `s` is a
//! pure function of `(seed, s)` and the missing protocol, so a run resumed from
//! a checkpoint replays the exact same sequence of updates.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::Split;
use super::masks::{mask_for_sample, MissingProtocol, Subset};
use super::optim::{adam_step, grad_norm, AdamConfig, AdamState, LrSchedule};
use super::rng;
use crate::error::{Error, Result};
use crate::model::FusionModel;
use crate::nn::{load_named, Params};
use crate::tensor::io::Archive;
use crate::tensor::{Real, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Batch/mask seed; derived from the experiment seed when absent.
    pub seed: Option<u64>,
    pub missing_protocol: MissingProtocol,
    pub schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            steps: 2000,
            seed: None,
            missing_protocol: MissingProtocol::FixedPerSample,
            schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::Config { path: format!("train.{field}"), msg: msg.into() });
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", "must lie in [0, 1)");
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad("eps", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        match self.schedule {
            LrSchedule::StepHalving { every: 0 } => bad("schedule.every", "must be positive"),
            LrSchedule::Polynomial { max_epochs: 0 } => bad("schedule.max_epochs", "must be positive"),
            _ => Ok(()),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

pub struct Trainer<'a, T> {
    pub model: FusionModel<T>,
    pub state: AdamState<T>,
    /// Number of updates applied so far.
    pub step: usize,
    cfg: TrainConfig,
    seed: u64,
    data: &'a Split,
    groups: Option<(usize, BTreeMap<Subset, Vec<usize>>)>,
    last_grad_norm: f64,
}

impl<'a, T: Real> Trainer<'a, T> {
    pub fn new(model: FusionModel<T>, cfg: &TrainConfig, data: &'a Split) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.seed.ok_or_else(|| Error::Config {
            path: "train.seed".into(),
            msg: "unresolved; derive it from the experiment seed".into(),
        })?;
        if data.is_empty() {
            return Err(Error::invalid("train", "empty training split"));
        }
        Ok(Trainer {
            state: AdamState::zeros_like(&model),
            model,
            step: 0,
            cfg: cfg.clone(),
            seed,
            data,
            groups: None,
            last_grad_norm: 0.0,
        })
    }

    pub fn epoch_of(&self, step: usize) -> usize {
        step * self.cfg.batch_size / self.data.len()
    }

    fn groups_for(&mut self, epoch: usize) -> &BTreeMap<Subset, Vec<usize>> {
        let key = match self.cfg.missing_protocol {
            MissingProtocol::ResampleEachEpoch => epoch,
            _ => 0,
        };
        if self.groups.as_ref().is_none_or(|(e, _)| *e != key) {
            let total = self.data.modalities();
            let mut groups: BTreeMap<Subset, Vec<usize>> = BTreeMap::new();
            for i in 0..self.data.len() {
                let m = mask_for_sample(self.cfg.missing_protocol, total, self.seed, i, key);
                groups.entry(m).or_default().push(i);
            }
            self.groups = Some((key, groups));
        }
        &self.groups.as_ref().expect("just filled").1
    }

    /// Subset and rows used by update number `step` (0-based).
    pub fn batch_for(&mut self, step: usize) -> (Subset, Vec<usize>) {
        let epoch = self.epoch_of(step);
        let (seed, total, batch) = (self.seed, self.data.modalities(), self.cfg.batch_size);
        let protocol = self.cfg.missing_protocol;
        let mut r = rng::indexed(seed, "batches", step as u64);
        let anchor = r.random_range(0..self.data.len());
        let subset = mask_for_sample(protocol, total, seed, anchor, epoch);
        let group = &self.groups_for(epoch)[&subset];
        let rows = if group.len() >= batch {
            index::sample(&mut r, group.len(), batch).into_iter().map(|i| group[i]).collect()
        } else {
            (0..batch).map(|_| group[r.random_range(0..group.len())]).collect()
        };
        (subset, rows)
    }

    fn abort(&self, lr: f64) -> Error {
        Error::NumericalAbort { step: self.step, lr, grad_norm: self.last_grad_norm }
    }

    /// Applies one update and returns the pre-update batch loss.
    pub fn train_step(&mut self) -> Result<LossPoint> {
        let s = self.step;
        let lr = self.cfg.schedule.rate(self.cfg.lr, s, self.epoch_of(s));
        let (subset, rows) = self.batch_for(s);
        let input = self.data.batch::<T>(&subset.ids(), &rows)?;
        let labels = self.data.labels_of(&rows);
        let tape = Tape::new();
        let bound = self.model.bind(&tape);
        let forward = bound.logits(&tape, &input).and_then(|logits| tape.cross_entropy(&logits, &labels));
        let loss = match forward {
            Ok(l) if l.is_finite() => l,
            Ok(_) | Err(Error::NonFinite { .. }) => return Err(self.abort(lr)),
            Err(e) => return Err(e),
        };
        let grads = bound.gradients(&tape.backward(&loss)?)?;
        self.last_grad_norm = grad_norm(&grads);
        if !self.last_grad_norm.is_finite() {
            return Err(self.abort(lr));
        }
        adam_step(&mut self.model, &grads, &mut self.state, &self.cfg.adam(), lr, s as u64 + 1)?;
        self.step += 1;
        Ok(LossPoint { step: s, loss: loss.item().f64(), lr })
    }

    /// Trains until `self.step == until`.
    pub fn run_until(&mut self, until: usize) -> Result<Vec<LossPoint>> {
        let mut curve = Vec::with_capacity(until.saturating_sub(self.step));
        while self.step < until {
            curve.push(self.train_step()?);
        }
        Ok(curve)
    }

    pub fn run(&mut self) -> Result<Vec<LossPoint>> {
        self.run_until(self.cfg.steps)
    }

    /// Parameters, Adam moments and the step counter in one archive.
    pub fn checkpoint(&self, meta: impl Into<String>) -> Archive {
        let mut a = Archive::new(meta);
        for (name, t) in self.model.named_params() {
            a.push(format!("param.{name}"), &t);
        }
        for (i, (name, _)) in self.model.named_params().into_iter().enumerate() {
            a.push(format!("adam.m.{name}"), &self.state.m[i]);
            a.push(format!("adam.v.{name}"), &self.state.v[i]);
        }
        a.push("train.step", &Tensor::<f64>::scalar(self.step as f64));
        a
    }

    /// Restores a trainer from [`checkpoint`](Self::checkpoint); `model` supplies
    /// the architecture and is overwritten.
    pub fn resume(mut model: FusionModel<T>, cfg: &TrainConfig, data: &'a Split, a: &Archive) -> Result<Self> {
        load_model(&mut model, a)?;
        let mut t = Trainer::new(model, cfg, data)?;
        for (i, (name, _)) in t.model.named_params().into_iter().enumerate() {
            t.state.m[i] = a.require(&format!("adam.m.{name}"))?;
            t.state.v[i] = a.require(&format!("adam.v.{name}"))?;
        }
        t.step = a.require::<f64>("train.step")?.item() as usize;
        Ok(t)
    }
}

/// Loads `param.*` entries of a checkpoint into `model`.
pub fn load_model<T: Real>(model: &mut FusionModel<T>, a: &Archive) -> Result<()> {
    load_named(model, |name| a.require(&format!("param.{name}")).ok())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::BlockConfig;
    use crate::harness::data::{generate_dataset, CorrelationMode, SplitSizes, SyntheticTaskSpec};
    use crate::model::{FuserKind, ModelConfig};

    fn setup(fuser: FuserKind) -> (crate::harness::data::Dataset, ModelConfig, TrainConfig) {
        let spec = SyntheticTaskSpec {
            modalities: 3,
            channels: 4,
            feature_shape: vec![3],
            correlation_mode: CorrelationMode::Redundant,
            samples: SplitSizes { train: 40, val: 8, test: 8 },
            seed: Some(1),
            ..SyntheticTaskSpec::default()
        };
        let data = generate_dataset(&spec).unwrap();
        let model = ModelConfig {
            fuser,
            total: 3,
            channels: 4,
            feature_shape: vec![3],
            num_classes: 2,
            block: BlockConfig { channels: 4, depth: 1, num_heads: 2, ..BlockConfig::default() },
            conv_depth: 1,
        };
        let train = TrainConfig { batch_size: 4, steps: 12, seed: Some(5), lr: 1e-2, ..TrainConfig::default() };
        (data, model, train)
    }

    fn init(cfg: &ModelConfig) -> FusionModel<f32> {
        FusionModel::init(&mut rng::stream(3, "init"), cfg).unwrap()
    }

    #[test]
    fn batches_share_a_subset_and_are_pure() {
        let (data, mcfg, tcfg) = setup(FuserKind::Mean);
        let mut a = Trainer::new(init(&mcfg), &tcfg, &data.train).unwrap();
        let mut b = Trainer::new(init(&mcfg), &tcfg, &data.train).unwrap();
        for s in [0, 7, 3, 100] {
            let (subset, rows) = a.batch_for(s);
            assert_eq!(b.batch_for(s), (subset, rows.clone()));
            assert_eq!(rows.len(), 4);
            for r in rows {
                assert_eq!(mask_for_sample(tcfg.missing_protocol, 3, 5, r, 0), subset);
            }
        }
    }

    #[test]
    fn resume_replays_identically() {
        let (data, mcfg, tcfg) = setup(FuserKind::Tfusion);
        let mut full = Trainer::new(init(&mcfg), &tcfg, &data.train).unwrap();
        let whole = full.run().unwrap();
        let mut first = Trainer::new(init(&mcfg), &tcfg, &data.train).unwrap();
        first.run_until(5).unwrap();
        let archive = Archive::from_bytes(&first.checkpoint("{}").to_bytes().unwrap()).unwrap();
        let mut resumed = Trainer::resume(init(&mcfg), &tcfg, &data.train, &archive).unwrap();
        assert_eq!(resumed.step, 5);
        let tail = resumed.run().unwrap();
        assert_eq!(&whole[5..], tail.as_slice());
    }

    #[test]
    fn divergence_aborts_with_diagnostics() {
        let (data, mcfg, mut tcfg) = setup(FuserKind::Mean);
        tcfg.lr = 1e38;
        let mut t = Trainer::new(init(&mcfg), &tcfg, &data.train).unwrap();
        match t.run() {
            Err(Error::NumericalAbort { step, lr, .. }) => {
                assert!(step >= 1);
                assert_eq!(lr, 1e38);
            }
            other => panic!("expected abort, got {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig { lr: 0.0, ..ok.clone() },
            TrainConfig { beta1: 1.0, ..ok.clone() },
            TrainConfig { beta2: -0.1, ..ok.clone() },
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { schedule: LrSchedule::StepHalving { every: 0 }, ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config { .. })));
        }
    }
}
