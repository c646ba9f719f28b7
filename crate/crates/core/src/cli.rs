//! Command-line front end.
//!
//! Exit codes: 0 success, 1 verification failure (or other runtime error),
//! 2 configuration or usage error, 3 numerical abort.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::experiment::{compare, dataset_for, load_checkpoint, train_and_evaluate, CompareReport, RunHeader};
use crate::harness::data::Dataset;
use crate::harness::eval::{evaluate_all, write_table_csv, AccuracyTable, Metrics};
use crate::model::FuserKind;
use crate::suites::{checked_op_families, gradcheck, invariants, GradReport, Scope};
use crate::tensor::io::Archive;
use crate::tensor::{OpKind, Precision, Real};

pub const EXIT_OK: u8 = 0;
pub const EXIT_VERIFY: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_ABORT: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "nfuse", version, about = "N-to-one multimodal fusion experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Finite-difference gradient verification.
    Gradcheck(GradcheckArgs),
    /// Randomized invariant suites on the fusion block.
    Invariants(InvariantArgs),
    /// Train one fuser and evaluate it on every modality subset.
    Train(RunArgs),
    /// Evaluate a checkpoint on every modality subset.
    Evaluate(EvaluateArgs),
    /// Train several fusers under identical budgets and compare them.
    Compare(CompareArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScopeArg {
    Ops,
    Layer,
    Block,
    #[value(alias = "end_to_end")]
    EndToEnd,
    All,
}

impl ScopeArg {
    fn scopes(self) -> Vec<Scope> {
        match self {
            ScopeArg::Ops => vec![Scope::Ops],
            ScopeArg::Layer => vec![Scope::Layer],
            ScopeArg::Block => vec![Scope::Block],
            ScopeArg::EndToEnd => vec![Scope::EndToEnd],
            ScopeArg::All => Scope::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub scope: ScopeArg,
    #[arg(long, value_enum, default_value = "f64")]
    pub precision: PrecisionArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the report as JSON into this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Corrupt the backward rule of one op family (test fixture).
    #[arg(long, hide = true, value_parser = parse_op)]
    pub fault: Option<OpKind>,
}

fn parse_op(s: &str) -> std::result::Result<OpKind, String> {
    OpKind::from_name(s).ok_or_else(|| format!("unknown op `{s}`"))
}

#[derive(Debug, Args)]
pub struct InvariantArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random trials per invariant.
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub precision: Option<PrecisionArg>,
    #[arg(long)]
    pub fuser: Option<FuserKind>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Checkpoint written by `train`; defaults to `<out>/checkpoint.tfmf`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset cache directory; the dataset is regenerated from the
    /// checkpoint's config when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub precision: Option<PrecisionArg>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Fusers to compare (comma separated or repeated); defaults to the config's list.
    #[arg(long = "fusers", value_delimiter = ',')]
    pub fusers: Vec<FuserKind>,
    /// Number of replicate seeds.
    #[arg(long)]
    pub seeds: Option<usize>,
}

/// Parses `std::env::args` and runs; the returned code is the process exit status.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    ExitCode::from(run(cli))
}

pub fn run(cli: Cli) -> u8 {
    let result = match cli.command {
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Invariants(a) => cmd_invariants(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Compare(a) => cmd_compare(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => EXIT_CONFIG,
        Error::NumericalAbort { .. } => EXIT_ABORT,
        _ => EXIT_VERIFY,
    }
}

fn write_json(dir: &Path, name: &str, value: &impl serde::Serialize) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut f = BufWriter::new(File::create(dir.join(name))?);
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<u8> {
    let mut reports: Vec<GradReport> = Vec::new();
    for scope in a.scope.scopes() {
        let r = match Precision::from(a.precision) {
            Precision::F64 => gradcheck::<f64>(scope, a.seed, a.fault)?,
            Precision::F32 => gradcheck::<f32>(scope, a.seed, a.fault)?,
        };
        for line in &r {
            println!("{line}");
        }
        reports.extend(r);
    }
    if a.scope.scopes().contains(&Scope::Ops) {
        println!("op families checked: {}", checked_op_families().join(", "));
    }
    let failed: Vec<&GradReport> = reports.iter().filter(|r| !r.passed()).collect();
    if let Some(dir) = &a.out {
        write_json(
            dir,
            "gradcheck.json",
            &json!({ "precision": Precision::from(a.precision), "seed": a.seed, "reports": reports }),
        )?;
    }
    if failed.is_empty() {
        println!("gradcheck: all {} groups within tolerance", reports.len());
        Ok(EXIT_OK)
    } else {
        for r in &failed {
            eprintln!(
                "gradcheck failed: {} `{}` max relative error {:.3e} exceeds {:.0e}",
                r.scope, r.group, r.max_rel_error, r.tolerance
            );
        }
        Ok(EXIT_VERIFY)
    }
}

fn cmd_invariants(a: &InvariantArgs) -> Result<u8> {
    let reports = invariants(a.seed, a.trials)?;
    for r in &reports {
        println!("{r}");
    }
    if let Some(dir) = &a.out {
        write_json(dir, "invariants.json", &json!({ "seed": a.seed, "reports": reports }))?;
    }
    let ok = reports.iter().all(|r| r.passed());
    println!("invariants: {}", if ok { "all passed" } else { "FAILED" });
    Ok(if ok { EXIT_OK } else { EXIT_VERIFY })
}

/// Config file plus command-line overrides, validated and resolved.
fn load_config(a: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &a.out {
        cfg.out_dir = out.clone();
    }
    if let Some(p) = a.precision {
        cfg.precision = p.into();
    }
    if let Some(f) = a.fuser {
        cfg.fuser = f;
    }
    cfg.validate()?;
    Ok(cfg.resolved())
}

fn write_loss_curve(path: &Path, header: &RunHeader, m: &Metrics) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    for line in header.comment_lines() {
        writeln!(f, "# {line}")?;
    }
    let mut w = csv::Writer::from_writer(f);
    let csv_err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    w.write_record(["step", "loss", "lr"]).map_err(csv_err)?;
    for p in &m.loss_curve {
        w.write_record([p.step.to_string(), p.loss.to_string(), p.lr.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn write_jsonl(path: &Path, records: &[serde_json::Value]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

fn write_table(path: &Path, header: &[String], table: &AccuracyTable) -> Result<()> {
    table.write_csv(BufWriter::new(File::create(path)?), header)
}

fn cmd_train(a: &RunArgs) -> Result<u8> {
    let cfg = load_config(a)?;
    println!("{}", cfg.to_json_pretty());
    let data = dataset_for(&cfg)?;
    let out = &cfg.out_dir;
    fs::create_dir_all(out)?;
    write_json(out, "config.resolved.json", &cfg)?;
    data.save_cache(&out.join("data"))?;
    let (checkpoint, metrics) = match cfg.precision {
        Precision::F32 => train_outputs::<f32>(&cfg, &data)?,
        Precision::F64 => train_outputs::<f64>(&cfg, &data)?,
    };
    let header = RunHeader::of(&cfg);
    checkpoint.save(out.join("checkpoint.tfmf"))?;
    write_loss_curve(&out.join("loss_curve.csv"), &header, &metrics)?;
    write_table(&out.join("table.csv"), &header.comment_lines(), &metrics.table)?;
    write_jsonl(&out.join("metrics.jsonl"), &[json!({ "kind": "train", "header": header, "metrics": metrics })])?;
    print_table(&metrics.table);
    eprintln!("wall time {:.2}s", metrics.wall_time_s);
    Ok(EXIT_OK)
}

fn train_outputs<T: Real>(cfg: &ExperimentConfig, data: &Dataset) -> Result<(Archive, Metrics)> {
    let out = train_and_evaluate::<T>(cfg, data)?;
    Ok((out.checkpoint, out.metrics))
}

fn print_table(t: &AccuracyTable) {
    for row in &t.rows {
        let marks: String = (1..=t.modalities).map(|k| if row.subset.contains(&k) { '●' } else { '○' }).collect();
        println!("{marks}  {:.4}", row.accuracy);
    }
    println!("{:<width$}  {:.4}", "average", t.average, width = t.modalities);
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<u8> {
    let path = match (&a.checkpoint, &a.out) {
        (Some(p), _) => p.clone(),
        (None, Some(out)) => out.join("checkpoint.tfmf"),
        (None, None) => {
            return Err(Error::Config {
                path: "--checkpoint".into(),
                msg: "give a checkpoint or an --out directory holding one".into(),
            })
        }
    };
    let archive = Archive::load(&path)?;
    let precision = a.precision.map(Precision::from);
    let (cfg, table) = match precision.unwrap_or(Precision::F32) {
        Precision::F32 => evaluate_checkpoint::<f32>(&archive, a.data.as_deref())?,
        Precision::F64 => evaluate_checkpoint::<f64>(&archive, a.data.as_deref())?,
    };
    let header = RunHeader::of(&cfg);
    let out = a.out.clone().unwrap_or_else(|| path.parent().map(Path::to_path_buf).unwrap_or_default());
    fs::create_dir_all(&out)?;
    write_table(&out.join("evaluation.csv"), &header.comment_lines(), &table)?;
    write_jsonl(
        &out.join("evaluation.jsonl"),
        &[json!({ "kind": "evaluate", "checkpoint": path, "header": header, "table": table })],
    )?;
    print_table(&table);
    Ok(EXIT_OK)
}

fn evaluate_checkpoint<T: Real>(a: &Archive, data_dir: Option<&Path>) -> Result<(ExperimentConfig, AccuracyTable)> {
    let (cfg, model) = load_checkpoint::<T>(a)?;
    let data = match data_dir {
        Some(d) => Dataset::load_cache(d)?,
        None => dataset_for(&cfg)?,
    };
    let table = evaluate_all(&model, &data.test, cfg.task.modalities)?;
    Ok((cfg, table))
}

fn cmd_compare(a: &CompareArgs) -> Result<u8> {
    let mut cfg = load_config(&a.run)?;
    if !a.fusers.is_empty() {
        cfg.compare.fusers = a.fusers.clone();
    }
    if let Some(n) = a.seeds {
        cfg.compare.seeds = n;
    }
    cfg.validate()?;
    let fusers = cfg.compare.fusers.clone();
    if fusers.len() < 2 {
        return Err(Error::Config {
            path: "compare.fusers".into(),
            msg: format!("comparison needs at least two fusers, got {}", fusers.len()),
        });
    }
    println!("{}", cfg.to_json_pretty());
    let progress = |m: &Metrics| {
        eprintln!("seed {:>4} {:<14} mean accuracy {:.4} ({:.1}s)", m.seed, m.fuser, m.mean_accuracy, m.wall_time_s)
    };
    let report = match cfg.precision {
        Precision::F32 => compare::<f32>(&cfg, &fusers, progress)?,
        Precision::F64 => compare::<f64>(&cfg, &fusers, progress)?,
    };
    write_compare(&cfg, &report)?;
    print_compare(&report);
    Ok(EXIT_OK)
}

/// `compare.csv`, `compare.json` and `runs.jsonl` in the output directory.
pub fn write_compare(cfg: &ExperimentConfig, report: &CompareReport) -> Result<()> {
    let out = &cfg.out_dir;
    fs::create_dir_all(out)?;
    let header = vec![
        format!(
            "seeds={:?} fusers={}",
            report.seeds,
            report.fusers.iter().map(|f| f.name()).collect::<Vec<_>>().join(",")
        ),
        format!("config={}", cfg.to_json()),
    ];
    let columns: Vec<(String, AccuracyTable)> =
        report.fusers.iter().map(|f| (f.name().to_string(), report.tables[f].clone())).collect();
    write_table_csv(
        BufWriter::new(File::create(out.join("compare.csv"))?),
        &header,
        cfg.task.modalities,
        &columns,
        true,
    )?;
    let per_seed: serde_json::Map<String, serde_json::Value> =
        report.fusers.iter().map(|&f| (f.name().to_string(), json!(report.per_seed_means(f)))).collect();
    write_json(
        out,
        "compare.json",
        &json!({
            "config": cfg,
            "seeds": report.seeds,
            "fusers": report.fusers,
            "per_seed_mean_accuracy": per_seed,
            "pairs": report.pairs,
        }),
    )?;
    let records: Vec<serde_json::Value> = report
        .seeds
        .iter()
        .enumerate()
        .flat_map(|(i, _)| {
            report.fusers.iter().map(move |f| {
                let m = &report.runs[f][i];
                json!({ "kind": "compare_run", "seed": m.seed, "fuser": m.fuser, "table": m.table, "mean_accuracy": m.mean_accuracy })
            })
        })
        .collect();
    write_jsonl(&out.join("runs.jsonl"), &records)
}

fn print_compare(report: &CompareReport) {
    for f in &report.fusers {
        println!("{:<14} mean accuracy {:.4}", f.name(), report.tables[f].average);
    }
    for p in &report.pairs {
        let show = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |p| format!("{p:.4}"));
        println!(
            "{} vs {}: mean delta {:+.4}, p(subsets) {}, p(seeds) {}",
            p.a,
            p.b,
            p.per_subset.mean_delta,
            show(p.per_subset.p_value),
            show(p.per_seed.p_value)
        );
    }
}
