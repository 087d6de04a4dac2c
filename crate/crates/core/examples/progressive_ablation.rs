//! Ablates the units of one module in order of selectivity and in random
//! orders, printing the normalized accuracy curves and their AUCs.
//!
//!     cargo run --release --example progressive_ablation -- [MODULE] [EPOCHS]

use selectroscope::ablation::{auc_over_epochs, AblationOrdering, Scope, SweepOptions};
use selectroscope::config::ExperimentConfig;
use selectroscope::{trainer, Checkpoint};

fn main() -> selectroscope::Result<()> {
    let mut args = std::env::args().skip(1);
    let module = args.next().and_then(|a| a.parse().ok()).unwrap_or(1);
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(4);

    let mut cfg = ExperimentConfig::default();
    cfg.run.epochs = epochs;
    let (train, eval) = cfg.data.load(None)?;
    let dir = std::env::temp_dir().join("selectroscope_ablation_example");
    let _ = std::fs::remove_dir_all(&dir);
    trainer::train(&cfg, &train, &eval, Some(&dir))?;

    let checkpoints = selectroscope::report::checkpoints_in(&dir)?
        .iter()
        .map(|p| Checkpoint::load(p))
        .collect::<selectroscope::Result<Vec<_>>>()?;
    let opts = SweepOptions {
        module,
        orderings: vec![AblationOrdering::Selective, AblationOrdering::Random],
        steps: 8,
        random_seeds: vec![0, 1, 2],
        batch_size: 256,
        scope: Scope::Module,
    };
    let (curves, rows) = auc_over_epochs(&checkpoints, &eval, &opts)?;

    let last = checkpoints.last().expect("training wrote checkpoints").meta;
    println!("curves at {} (module {module}):", last.id());
    for c in curves.iter().filter(|c| c.checkpoint == last) {
        let pts: Vec<String> = c.points.iter().map(|p| format!("{:.0}", p.norm_acc)).collect();
        let label = match c.seed {
            Some(s) => format!("{} seed {s}", c.ordering),
            None => c.ordering.to_string(),
        };
        println!("  {label:<16} [{}]", pts.join(", "));
    }
    println!("AUC by epoch:");
    for r in &rows {
        println!(
            "  epoch {:>2} {:<9} {:>7.1}  [{:.1}, {:.1}]",
            r.checkpoint.epoch, r.ordering, r.auc, r.ci_low, r.ci_high
        );
    }
    Ok(())
}
