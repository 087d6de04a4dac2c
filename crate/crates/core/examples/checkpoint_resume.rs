//! Trains with sub-epoch checkpoints, resumes from one of them in a second
//! directory and confirms the continuation matches the original log byte for
//! byte.
//!
//!     cargo run --release --example checkpoint_resume

use selectroscope::config::ExperimentConfig;
use selectroscope::{trainer, Checkpoint};

fn main() -> selectroscope::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.run.epochs = 3;
    cfg.run.sub_epoch_every = 4;
    let (train, eval) = cfg.data.load(None)?;

    let base = std::env::temp_dir().join("selectroscope_resume_example");
    let _ = std::fs::remove_dir_all(&base);
    let (a, b) = (base.join("original"), base.join("resumed"));
    let original = trainer::train(&cfg, &train, &eval, Some(&a))?;

    let ckpts = selectroscope::report::checkpoints_in(&a)?;
    println!("checkpoints: {}", ckpts.len());
    let mid = Checkpoint::load(&ckpts[ckpts.len() / 2])?;
    println!("resuming from {}", mid.meta.id());
    let resumed = trainer::resume(&cfg, &mid, &train, &eval, Some(&b))?;

    let tail: Vec<_> = original
        .records
        .iter()
        .filter(|r| (r.epoch, r.batch_index) > (mid.meta.epoch, mid.meta.batch_index))
        .cloned()
        .collect();
    let same = trainer::RunMetrics { records: tail }.to_jsonl() == resumed.to_jsonl();
    println!("{} records after the checkpoint; identical continuation: {same}", resumed.records.len());
    Ok(())
}
