//! Every fuser on the xor_pair task, where only cross-modal interactions
//! carry the label. Seed count is the first argument (default 2).
//!
//! `cargo run --release --example ablation -- 5`

use nfuse::config::ExperimentConfig;
use nfuse::experiment::compare;
use nfuse::harness::data::CorrelationMode;
use nfuse::model::FuserKind;
use nfuse::Result;

fn main() -> Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.task.correlation_mode = CorrelationMode::XorPair;
    cfg.compare.seeds = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let report = compare::<f32>(&cfg, &FuserKind::ALL, |m| {
        eprintln!("seed {} {:<14} {:.3} ({:.1}s)", m.seed, m.fuser, m.mean_accuracy, m.wall_time_s)
    })?;
    for f in &report.fusers {
        println!("{:<14} mean accuracy {:.3}", f.name(), report.tables[f].average);
    }
    for p in report.pairs.iter().filter(|p| p.a == FuserKind::Tfusion) {
        let pv = p.per_subset.p_value.map_or("NA".into(), |v| format!("{v:.4}"));
        println!("{} - tfusion: mean delta {:+.3}, signed-rank p {pv}", p.b.name(), p.per_subset.mean_delta);
    }
    Ok(())
}
