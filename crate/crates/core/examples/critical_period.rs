//! Early versus late suppression of selectivity. Trains three arms per seed:
//! no regularizer, alpha from epoch 5, alpha from epoch 0, and compares the
//! final training accuracy.
//!
//!     cargo run --release --example critical_period -- [ALPHA] [SIGMA] [LR] [SEEDS] [EPOCHS]
//!
//! Without batch norm a large negative alpha can silence whole layers (a
//! dead unit has SI = 0), so the defaults use a milder alpha on a noisier task.

use rayon::prelude::*;
use selectroscope::config::{DataConfig, ExperimentConfig, RegularizerSchedule};
use selectroscope::trainer;

fn arg<T: std::str::FromStr>(args: &[String], i: usize, default: T) -> T {
    args.get(i).and_then(|a| a.parse().ok()).unwrap_or(default)
}

fn main() -> selectroscope::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let alpha: f64 = arg(&args, 0, -3.0);
    let sigma: f64 = arg(&args, 1, 1.0);
    let lr: f64 = arg(&args, 2, 0.02);
    let seeds: u64 = arg(&args, 3, 5);
    let epochs: usize = arg(&args, 4, 20);

    let arms = [("none", None), ("from epoch 5", Some(5)), ("from epoch 0", Some(0))];
    let jobs: Vec<(usize, u64)> = (0..arms.len()).flat_map(|a| (0..seeds).map(move |s| (a, s))).collect();
    let results: Vec<(usize, u64, Option<f64>)> = jobs
        .into_par_iter()
        .map(|(a, seed)| {
            let mut cfg = ExperimentConfig::default();
            if let DataConfig::Synthetic(s) = &mut cfg.data {
                s.noise_sigma = sigma;
            }
            cfg.optimizer.learning_rate = lr;
            cfg.run.epochs = epochs;
            cfg.run.seed = seed;
            cfg.schedule = arms[a].1.map(|start_epoch| RegularizerSchedule {
                alpha,
                start_epoch,
                stop_epoch: None,
                targeted_modules: None,
            });
            let (tr, ev) = cfg.data.load(None)?;
            match trainer::train(&cfg, &tr, &ev, None) {
                Ok(m) => Ok((a, seed, m.last().and_then(|r| r.train_acc))),
                // diverged
                Err(e) if e.is_numeric() => Ok((a, seed, None)),
                Err(e) => Err(e),
            }
        })
        .collect::<selectroscope::Result<_>>()?;

    println!("alpha {alpha}, sigma {sigma}, lr {lr}, {epochs} epochs");
    let mut stats = Vec::new();
    for (a, (name, _)) in arms.iter().enumerate() {
        // a diverged run scores chance
        let accs: Vec<f64> = results.iter().filter(|r| r.0 == a).map(|r| r.2.unwrap_or(0.1)).collect();
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let sd = (accs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (accs.len().max(2) - 1) as f64).sqrt();
        let list: Vec<String> = accs.iter().map(|x| format!("{x:.3}")).collect();
        println!("{name:>13}: {mean:.3} ± {sd:.3}  [{}]", list.join(" "));
        stats.push((mean, sd));
    }
    let pooled = ((stats[1].1.powi(2) + stats[2].1.powi(2)) / 2.0).sqrt();
    println!("gap (epoch 5 - epoch 0) {:.3}, pooled sd {pooled:.3}", stats[1].0 - stats[2].0);
    Ok(())
}
