//! Prediction histograms and the mean of the top-5 class counts over
//! training; a collapsed network piles its predictions onto few classes.
//!
//!     cargo run --release --example class_balance

use selectroscope::config::ExperimentConfig;
use selectroscope::trainer::{self, class_balance};
use selectroscope::Checkpoint;

fn main() -> selectroscope::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.run.epochs = 4;
    let (train, eval) = cfg.data.load(None)?;
    let dir = std::env::temp_dir().join("selectroscope_balance_example");
    let _ = std::fs::remove_dir_all(&dir);
    trainer::train(&cfg, &train, &eval, Some(&dir))?;

    println!("eval set: {} samples, {} per class", eval.len(), eval.len() / eval.num_classes());
    for path in selectroscope::report::checkpoints_in(&dir)? {
        let ck = Checkpoint::load(&path)?;
        let ev = trainer::evaluate(&ck.model()?, &eval, 256)?;
        println!(
            "{}  acc {:.3}  top-5 mean {:>5.1}  counts {:?}",
            ck.meta.id(),
            ev.accuracy,
            class_balance(&ev.counts, 5)?,
            ev.counts
        );
    }
    Ok(())
}
