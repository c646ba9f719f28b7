//! End-to-end runs: train one fuser, or compare several over replicate seeds.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::harness::data::{generate_dataset, Dataset};
use crate::harness::eval::{
    evaluate_all, paired_comparison, paired_values, AccuracyTable, Metrics, PairedComparison, SubsetAccuracy,
};
use crate::harness::rng;
use crate::harness::train::Trainer;
use crate::model::{FuserKind, FusionModel};
use crate::tensor::io::Archive;
use crate::tensor::Real;

pub struct RunOutput<T> {
    pub model: FusionModel<T>,
    pub checkpoint: Archive,
    pub metrics: Metrics,
}

/// Header embedded in every artifact of a run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunHeader {
    pub seed: u64,
    pub fuser: FuserKind,
    pub config: ExperimentConfig,
}

impl RunHeader {
    pub fn of(cfg: &ExperimentConfig) -> Self {
        RunHeader { seed: cfg.seed, fuser: cfg.fuser, config: cfg.clone() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("header serializes")
    }

    /// Comment lines for CSV outputs.
    pub fn comment_lines(&self) -> Vec<String> {
        vec![format!("seed={} fuser={}", self.seed, self.fuser), format!("config={}", self.config.to_json())]
    }
}

/// Generates the dataset of a resolved config.
pub fn dataset_for(cfg: &ExperimentConfig) -> Result<Dataset> {
    generate_dataset(&cfg.resolved().task)
}

pub fn init_model<T: Real>(cfg: &ExperimentConfig) -> Result<FusionModel<T>> {
    FusionModel::init(&mut rng::stream(cfg.seed, "init"), &cfg.model_config())
}

/// Trains `cfg.fuser` on `data.train` and evaluates every subset on `data.test`.
pub fn train_and_evaluate<T: Real>(cfg: &ExperimentConfig, data: &Dataset) -> Result<RunOutput<T>> {
    let cfg = cfg.resolved();
    if data.spec != cfg.task {
        return Err(Error::invalid("train", "dataset was generated from a different task spec"));
    }
    let start = Instant::now();
    let mut trainer = Trainer::new(init_model::<T>(&cfg)?, &cfg.train, &data.train)?;
    let loss_curve = trainer.run()?;
    let table = evaluate_all(&trainer.model, &data.test, cfg.task.modalities)?;
    let header = RunHeader::of(&cfg);
    let checkpoint = trainer.checkpoint(header.to_json());
    let metrics = Metrics {
        seed: cfg.seed,
        fuser: cfg.fuser.name().to_string(),
        mean_accuracy: table.average,
        table,
        loss_curve,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok(RunOutput { model: trainer.model, checkpoint, metrics })
}

/// Restores the model stored in a checkpoint together with its config.
pub fn load_checkpoint<T: Real>(a: &Archive) -> Result<(ExperimentConfig, FusionModel<T>)> {
    let header: RunHeader =
        serde_json::from_str(&a.meta).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let cfg = header.config;
    cfg.validate()?;
    let mut model = init_model::<T>(&cfg)?;
    crate::harness::train::load_model(&mut model, a)?;
    Ok((cfg, model))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairReport {
    pub a: FuserKind,
    pub b: FuserKind,
    /// Over subsets, using seed-averaged accuracies.
    pub per_subset: PairedComparison,
    /// Over seeds, using each run's mean accuracy.
    pub per_seed: PairedComparison,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompareReport {
    pub seeds: Vec<u64>,
    pub fusers: Vec<FuserKind>,
    /// Per fuser, one run per seed (in `seeds` order).
    pub runs: BTreeMap<FuserKind, Vec<Metrics>>,
    /// Per fuser, accuracies averaged over seeds.
    pub tables: BTreeMap<FuserKind, AccuracyTable>,
    pub pairs: Vec<PairReport>,
}

impl CompareReport {
    pub fn per_seed_means(&self, fuser: FuserKind) -> Vec<f64> {
        self.runs[&fuser].iter().map(|m| m.mean_accuracy).collect()
    }
}

fn seed_average(tables: &[&AccuracyTable]) -> AccuracyTable {
    let first = tables[0];
    let rows = (0..first.rows.len())
        .map(|i| {
            let correct: usize = tables.iter().map(|t| t.rows[i].correct).sum();
            let total: usize = tables.iter().map(|t| t.rows[i].total).sum();
            let accuracy = tables.iter().map(|t| t.rows[i].accuracy).sum::<f64>() / tables.len() as f64;
            SubsetAccuracy { subset: first.rows[i].subset.clone(), correct, total, accuracy }
        })
        .collect();
    AccuracyTable::new(first.modalities, rows)
}

/// Trains every fuser under identical seeds and budget, then compares.
///
/// `progress` is called after each run.
pub fn compare<T: Real>(
    cfg: &ExperimentConfig,
    fusers: &[FuserKind],
    mut progress: impl FnMut(&Metrics),
) -> Result<CompareReport> {
    if fusers.len() < 2 {
        return Err(Error::Config {
            path: "compare.fusers".into(),
            msg: format!("comparison needs at least two fusers, got {}", fusers.len()),
        });
    }
    let seeds: Vec<u64> = (0..cfg.compare.seeds as u64).map(|i| cfg.seed + i).collect();
    let mut runs: BTreeMap<FuserKind, Vec<Metrics>> = BTreeMap::new();
    for &seed in &seeds {
        let base = cfg.with_seed(seed).resolved();
        let data = generate_dataset(&base.task)?;
        for &fuser in fusers {
            let run_cfg = ExperimentConfig { fuser, ..base.clone() };
            let out = train_and_evaluate::<T>(&run_cfg, &data)?;
            progress(&out.metrics);
            runs.entry(fuser).or_default().push(out.metrics);
        }
    }
    let tables: BTreeMap<FuserKind, AccuracyTable> =
        runs.iter().map(|(&f, ms)| (f, seed_average(&ms.iter().map(|m| &m.table).collect::<Vec<_>>()))).collect();
    let mut pairs = Vec::new();
    for (i, &a) in fusers.iter().enumerate() {
        for &b in &fusers[i + 1..] {
            let per_seed_deltas =
                runs[&a].iter().zip(&runs[&b]).map(|(x, y)| y.mean_accuracy - x.mean_accuracy).collect();
            let seed_labels = seeds.iter().map(|&s| vec![s as usize]).collect();
            pairs.push(PairReport {
                a,
                b,
                per_subset: paired_comparison(&tables[&a], &tables[&b])?,
                per_seed: paired_values(seed_labels, per_seed_deltas),
            });
        }
    }
    Ok(CompareReport { seeds, fusers: fusers.to_vec(), runs, tables, pairs })
}
