//! Representational similarity between module outputs and the logits, before
//! and after training.
//!
//!     cargo run --release --example cka_similarity

use selectroscope::cka::{cka_matrix, Features};
use selectroscope::config::ExperimentConfig;
use selectroscope::{trainer, Checkpoint, Model, Site};

fn print_matrix(title: &str, sites: &[Site], m: &[Vec<f64>]) {
    println!("{title}");
    print!("{:>9}", "");
    for s in sites {
        print!("{:>9}", s.to_string());
    }
    println!();
    for (s, row) in sites.iter().zip(m) {
        print!("{:>9}", s.to_string());
        for v in row {
            print!("{v:>9.3}");
        }
        println!();
    }
}

fn main() -> selectroscope::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.run.epochs = 5;
    let (train, eval) = cfg.data.load(None)?;
    let sites: Vec<Site> = (0..cfg.architecture.num_modules())
        .map(Site::ModuleOutput)
        .chain([Site::Logits])
        .collect();

    let init = Model::build(&cfg.architecture, cfg.run.seed)?;
    print_matrix("untrained", &sites, &cka_matrix(&init, &eval, &sites, Features::Pooled, 256)?);

    let dir = std::env::temp_dir().join("selectroscope_cka_example");
    let _ = std::fs::remove_dir_all(&dir);
    trainer::train(&cfg, &train, &eval, Some(&dir))?;
    let last = selectroscope::report::checkpoints_in(&dir)?.pop().expect("checkpoints written");
    let trained = Checkpoint::load(&last)?.model()?;
    print_matrix("trained", &sites, &cka_matrix(&trained, &eval, &sites, Features::Pooled, 256)?);
    Ok(())
}
