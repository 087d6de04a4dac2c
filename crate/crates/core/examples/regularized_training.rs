//! Trains with the selectivity term in the loss and prints the metrics log.
//! Negative alpha discourages selectivity, positive alpha encourages it.
//!
//!     cargo run --release --example regularized_training -- [ALPHA] [START_EPOCH] [EPOCHS]

use selectroscope::config::{ExperimentConfig, RegularizerSchedule};
use selectroscope::trainer;

fn main() -> selectroscope::Result<()> {
    let mut args = std::env::args().skip(1);
    let alpha: f64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(-1.0);
    let start_epoch = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(6);

    let mut cfg = ExperimentConfig::default();
    cfg.run.epochs = epochs;
    cfg.optimizer.learning_rate = 0.02;
    cfg.schedule = Some(RegularizerSchedule {
        alpha,
        start_epoch,
        stop_epoch: None,
        targeted_modules: None,
    });
    let (train, eval) = cfg.data.load(None)?;
    let metrics = trainer::train(&cfg, &train, &eval, None)?;

    println!("epoch batch  active  train_loss train_acc eval_acc  reg_mu_si  mean SI per module");
    for r in &metrics.records {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let si: Vec<String> = r.mean_si.iter().map(|s| format!("{s:.3}")).collect();
        println!(
            "{:>5} {:>5}  {:>6}  {:>10} {:>9} {:>8.3}  {:>9}  [{}]",
            r.epoch,
            r.batch_index,
            r.regularizer_active,
            opt(r.train_loss),
            opt(r.train_acc),
            r.eval_acc,
            opt(r.reg_mu_si),
            si.join(", ")
        );
    }
    Ok(())
}
