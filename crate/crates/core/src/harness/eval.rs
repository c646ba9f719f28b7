//! Per-subset evaluation, result tables and paired comparisons.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{argmax, Split};
use super::masks::{all_subsets, Subset};
use super::stats::wilcoxon_signed_rank;
use super::train::LossPoint;
use crate::error::{Error, Result};
use crate::model::FusionModel;
use crate::tensor::{Real, Tape};

/// Rows per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 128;

/// Environment variable capping the evaluation thread count.
pub const THREADS_ENV: &str = "NFUSE_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetAccuracy {
    pub subset: Vec<usize>,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// One row per non-empty subset in table order, plus the unweighted average.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub modalities: usize,
    pub rows: Vec<SubsetAccuracy>,
    pub average: f64,
}

impl AccuracyTable {
    pub fn new(modalities: usize, rows: Vec<SubsetAccuracy>) -> Self {
        let average =
            if rows.is_empty() { 0.0 } else { rows.iter().map(|r| r.accuracy).sum::<f64>() / rows.len() as f64 };
        AccuracyTable { modalities, rows, average }
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.accuracy).collect()
    }

    pub fn subsets(&self) -> Vec<&[usize]> {
        self.rows.iter().map(|r| r.subset.as_slice()).collect()
    }

    /// Columns `m1..mS` (1 = present) and `accuracy`; a final `average` row
    /// leaves the indicator cells empty.
    pub fn write_csv(&self, out: impl Write, header: &[String]) -> Result<()> {
        let columns = vec![("accuracy".to_string(), self.clone())];
        write_table_csv(out, header, self.modalities, &columns, false)
    }
}

fn comment_lines(mut out: impl Write, header: &[String]) -> Result<impl Write> {
    for line in header {
        writeln!(out, "# {line}")?;
    }
    Ok(out)
}

/// Writes several aligned tables side by side. With `mark_best`, a `best`
/// column names the highest-scoring column(s) of each row.
pub fn write_table_csv(
    out: impl Write,
    header: &[String],
    modalities: usize,
    columns: &[(String, AccuracyTable)],
    mark_best: bool,
) -> Result<()> {
    let out = comment_lines(out, header)?;
    let mut w = csv::Writer::from_writer(out);
    let mut head: Vec<String> = (1..=modalities).map(|k| format!("m{k}")).collect();
    head.extend(columns.iter().map(|(n, _)| n.clone()));
    if mark_best {
        head.push("best".into());
    }
    w.write_record(&head).map_err(csv_error)?;
    let rows = columns.first().map_or(0, |(_, t)| t.rows.len());
    let best_of = |vals: &[f64]| -> String {
        let top = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        columns.iter().zip(vals).filter(|(_, &v)| v == top).map(|((n, _), _)| n.as_str()).collect::<Vec<_>>().join("|")
    };
    for i in 0..rows {
        let subset = Subset::from_ids(&columns[0].1.rows[i].subset).expect("non-empty subset");
        let mut rec: Vec<String> =
            subset.indicators(modalities).into_iter().map(|b| if b { "1" } else { "0" }.to_string()).collect();
        let vals: Vec<f64> = columns.iter().map(|(_, t)| t.rows[i].accuracy).collect();
        rec.extend(vals.iter().map(|v| format!("{v:.6}")));
        if mark_best {
            rec.push(best_of(&vals));
        }
        w.write_record(&rec).map_err(csv_error)?;
    }
    let mut avg: Vec<String> = vec![String::new(); modalities];
    avg[0] = "average".into();
    let vals: Vec<f64> = columns.iter().map(|(_, t)| t.average).collect();
    avg.extend(vals.iter().map(|v| format!("{v:.6}")));
    if mark_best {
        avg.push(best_of(&vals));
    }
    w.write_record(&avg).map_err(csv_error)?;
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Accuracy of `model` on `split` with only `subset` available.
pub fn evaluate_subset<T: Real>(model: &FusionModel<T>, split: &Split, subset: Subset) -> Result<SubsetAccuracy> {
    if subset.max_id() > split.modalities() {
        return Err(Error::ModalityOutOfRange { id: subset.max_id(), max: split.modalities() });
    }
    let ids = subset.ids();
    let tape = Tape::new();
    let mut correct = 0;
    let all: Vec<usize> = (0..split.len()).collect();
    for rows in all.chunks(EVAL_CHUNK) {
        let input = split.batch::<T>(&ids, rows)?;
        let logits = model.logits(&tape, &input)?;
        let k = model.num_classes();
        correct += logits.data().chunks(k).zip(rows).filter(|(row, &r)| argmax(row) == split.labels[r]).count();
    }
    Ok(SubsetAccuracy { subset: ids, correct, total: split.len(), accuracy: correct as f64 / split.len() as f64 })
}

/// Thread cap from `NFUSE_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// Evaluates every non-empty subset of `{1..=total}` concurrently.
///
/// Rows come back in table order regardless of scheduling.
pub fn evaluate_all<T: Real>(model: &FusionModel<T>, split: &Split, total: usize) -> Result<AccuracyTable> {
    let subsets = all_subsets(total);
    let run = || subsets.par_iter().map(|&s| evaluate_subset(model, split, s)).collect::<Result<Vec<_>>>();
    let rows = match thread_cap() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::invalid("evaluate", e.to_string()))?
            .install(run)?,
        None => run()?,
    };
    Ok(AccuracyTable::new(total, rows))
}

/// Everything recorded about one training + evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub seed: u64,
    pub fuser: String,
    pub table: AccuracyTable,
    pub mean_accuracy: f64,
    pub loss_curve: Vec<LossPoint>,
    /// Not serialized: metrics files must be reproducible bit for bit.
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub subsets: Vec<Vec<usize>>,
    /// `b - a` per subset.
    pub deltas: Vec<f64>,
    pub mean_delta: f64,
    /// Two-sided Wilcoxon signed-rank p-value; `None` when not applicable.
    pub p_value: Option<f64>,
}

/// Per-subset deltas `b - a` and a signed-rank test over them.
pub fn paired_comparison(a: &AccuracyTable, b: &AccuracyTable) -> Result<PairedComparison> {
    if a.subsets() != b.subsets() {
        return Err(Error::invalid("paired_comparison", "tables cover different subsets"));
    }
    let deltas: Vec<f64> = a.rows.iter().zip(&b.rows).map(|(x, y)| y.accuracy - x.accuracy).collect();
    Ok(paired_values(a.subsets().iter().map(|s| s.to_vec()).collect(), deltas))
}

/// Signed-rank summary of arbitrary paired deltas (e.g. per seed).
pub fn paired_values(subsets: Vec<Vec<usize>>, deltas: Vec<f64>) -> PairedComparison {
    let mean_delta = if deltas.is_empty() { 0.0 } else { deltas.iter().sum::<f64>() / deltas.len() as f64 };
    PairedComparison { subsets, p_value: wilcoxon_signed_rank(&deltas), mean_delta, deltas }
}
