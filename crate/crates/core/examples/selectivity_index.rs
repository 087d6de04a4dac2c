//! Trains briefly on the synthetic task and reports the selectivity index of
//! every unit, summarized per module, with the most selective units listed.
//!
//!     cargo run --release --example selectivity_index [EPOCHS]

use selectroscope::config::ExperimentConfig;
use selectroscope::trainer;

fn main() -> selectroscope::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(3);
    let mut cfg = ExperimentConfig::default();
    cfg.run.epochs = epochs;
    let (train, eval) = cfg.data.load(None)?;

    let dir = std::env::temp_dir().join("selectroscope_si_example");
    trainer::train(&cfg, &train, &eval, Some(&dir))?;
    let (model, meta) = selectroscope::Model::load(&dir.join(format!(
        "ckpt_e{:03}_b{:05}.ckpt",
        epochs - 1,
        trainer::batches_per_epoch(train.len(), cfg.run.batch_size)
    )))?;

    let (ev, report) = trainer::evaluate_with_selectivity(&model, &eval, 256)?;
    println!("checkpoint {} eval accuracy {:.3}", meta.id(), ev.accuracy);
    for m in 0..cfg.architecture.num_modules() {
        println!("module {m}: mean SI {:.4}", report.module_mean(m).unwrap_or(0.0));
    }

    let mut units: Vec<_> = report
        .taps
        .iter()
        .flat_map(|(tap, recs)| recs.iter().enumerate().map(move |(c, r)| (*tap, c, *r)))
        .collect();
    units.sort_by(|a, b| b.2.si.total_cmp(&a.2.si));
    println!("most selective units:");
    for (tap, ch, r) in units.iter().take(8) {
        println!(
            "  {tap} channel {ch:>2}: SI {:.4} (prefers class {}, mu_max {:.4}, mu_-max {:.4})",
            r.si, r.argmax_class, r.mu_max, r.mu_neg_max
        );
    }
    Ok(())
}
