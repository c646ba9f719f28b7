//! Config-driven training with a checkpoint/resume round trip, then
//! evaluation on all fifteen modality subsets.
//!
//! `cargo run --release --example train_evaluate`

use nfuse::config::ExperimentConfig;
use nfuse::experiment::{dataset_for, init_model, load_checkpoint, RunHeader};
use nfuse::harness::eval::evaluate_all;
use nfuse::harness::train::Trainer;
use nfuse::tensor::io::Archive;
use nfuse::Result;

fn main() -> Result<()> {
    let cfg = ExperimentConfig::from_json(r#"{"seed": 7, "fuser": "tfusion", "train": {"steps": 400}}"#)?.resolved();
    let data = dataset_for(&cfg)?;
    println!("probe accuracy per modality {:?}", data.probe_accuracy);

    let mut trainer = Trainer::new(init_model::<f32>(&cfg)?, &cfg.train, &data.train)?;
    let head = trainer.run_until(200)?;
    let saved = Archive::from_bytes(&trainer.checkpoint(RunHeader::of(&cfg).to_json()).to_bytes()?)?;
    drop(trainer);

    let (_, model) = load_checkpoint::<f32>(&saved)?;
    let mut resumed = Trainer::resume(model, &cfg.train, &data.train, &saved)?;
    let tail = resumed.run()?;
    println!(
        "loss {:.4} -> {:.4} (resumed at step {})",
        head[0].loss,
        tail.last().map_or(f64::NAN, |p| p.loss),
        tail[0].step
    );

    let table = evaluate_all(&resumed.model, &data.test, cfg.task.modalities)?;
    let mut out = std::io::stdout().lock();
    table.write_csv(&mut out, &RunHeader::of(&cfg).comment_lines())?;
    Ok(())
}
