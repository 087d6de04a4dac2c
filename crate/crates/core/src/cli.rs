//! The `selectroscope` command line. Lives in the library so the binary is a
//! one-line wrapper and commands can be driven from tests.
//!
//! Exit codes: 0 success, 2 usage or configuration problems (and any other
//! non-numeric failure), 3 non-finite arithmetic.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::ablation::{self, AblationOrdering, Scope, SweepOptions};
use crate::checkpoint::Checkpoint;
use crate::cka::{self, Features};
use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Site;
use crate::report::{self, ReportOptions};
use crate::trainer;

pub const THREADS_ENV: &str = "SELECTROSCOPE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "selectroscope", version, about = "Class-selectivity instrumentation for small residual networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model, writing checkpoints, SI reports and a metrics log.
    Train(TrainArgs),
    /// Progressive ablation curves and AUC summaries.
    Ablate(AblateArgs),
    /// Selectivity index of every unit at each checkpoint.
    Si(CheckpointArgs),
    /// Pairwise CKA between activation sites at each checkpoint.
    Cka(CkaArgs),
    /// Prediction-class histograms and top-k class balance.
    Balance(BalanceArgs),
    /// Plot-ready data files for a finished run.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint instead of starting afresh.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Glob pattern selecting checkpoint files.
    #[arg(long)]
    pub checkpoints: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OrderingArg {
    Selective,
    Random,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CheckpointArgs,
    #[arg(long)]
    pub module: usize,
    #[arg(long, value_enum, default_value = "selective")]
    pub ordering: OrderingArg,
    /// Number of random orderings (seeds 0..N).
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Steps in the fraction grid 0, 1/steps, …, 1.
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    /// Rank units within each block instead of across the module.
    #[arg(long)]
    pub per_block: bool,
}

impl AblateArgs {
    fn scope(&self) -> Scope {
        if self.per_block {
            Scope::Block
        } else {
            Scope::Module
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SitesArg {
    /// Every block tap.
    Taps,
    /// Module outputs and the logits.
    Modules,
}

#[derive(Debug, Args)]
pub struct CkaArgs {
    #[command(flatten)]
    pub common: CheckpointArgs,
    #[arg(long, value_enum, default_value = "taps")]
    pub sites: SitesArg,
    /// Use every activation as a feature instead of channel means.
    #[arg(long)]
    pub flatten: bool,
}

#[derive(Debug, Args)]
pub struct BalanceArgs {
    #[command(flatten)]
    pub common: CheckpointArgs,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Defaults to the config stored in the run directory.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Modules to ablate for the AUC figure (repeatable).
    #[arg(long = "module")]
    pub modules: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return 2;
    }
    match execute(&cli.command) {
        Ok(written) => {
            for p in written {
                println!("{}", p.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        3
    } else {
        2
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // a second call in the same process (tests) keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn out_dir(cmd: &Command) -> &Path {
    match cmd {
        Command::Train(a) => &a.out,
        Command::Ablate(a) => &a.common.out,
        Command::Si(a) => &a.out,
        Command::Cka(a) => &a.common.out,
        Command::Balance(a) => &a.common.out,
        Command::Report(a) => &a.out,
    }
}

/// Runs one command. On failure, files it created in the output directory
/// (and the directory itself, if it created it) are removed.
pub fn execute(cmd: &Command) -> Result<Vec<PathBuf>> {
    let out = out_dir(cmd);
    let existed = out.exists();
    let before: BTreeSet<PathBuf> = if existed { listing(out)? } else { BTreeSet::new() };
    let result = dispatch(cmd);
    if result.is_err() && out.exists() {
        if existed {
            for p in listing(out)?.difference(&before) {
                let _ = fs::remove_file(p);
            }
        } else {
            let _ = fs::remove_dir_all(out);
        }
    }
    result
}

fn listing(dir: &Path) -> Result<BTreeSet<PathBuf>> {
    Ok(fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect())
}

fn dispatch(cmd: &Command) -> Result<Vec<PathBuf>> {
    match cmd {
        Command::Train(a) => train(a),
        Command::Ablate(a) => ablate(a),
        Command::Si(a) => si(a),
        Command::Cka(a) => cka_cmd(a),
        Command::Balance(a) => balance(a),
        Command::Report(a) => report_cmd(a),
    }
}

fn load_config(path: &Path) -> Result<(ExperimentConfig, Dataset, Dataset)> {
    if !path.is_file() {
        return Err(Error::Config(format!("config file {} not found", path.display())));
    }
    let cfg = ExperimentConfig::from_file(path)?;
    let (train, eval) = cfg.data.load(path.parent())?;
    Ok((cfg, train, eval))
}

fn load_checkpoints(pattern: &str, cfg: &ExperimentConfig) -> Result<Vec<Checkpoint>> {
    let paths = glob::glob(pattern).map_err(|e| Error::Config(format!("bad checkpoint pattern {pattern:?}: {e}")))?;
    let mut found = Vec::new();
    for p in paths {
        let p = p.map_err(|e| Error::Config(e.to_string()))?;
        found.push(Checkpoint::load(&p)?);
    }
    if found.is_empty() {
        return Err(Error::Config(format!("no checkpoints match {pattern:?}")));
    }
    for ck in &found {
        if ck.spec.num_classes != cfg.architecture.num_classes || ck.spec.input_shape != cfg.architecture.input_shape {
            return Err(Error::Config(format!(
                "checkpoint {} does not fit the configured data",
                ck.meta.id()
            )));
        }
    }
    found.sort_by_key(|c| c.meta);
    Ok(found)
}

fn create(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(dir: &Path, name: &str, body: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    let p = dir.join(name);
    report::write_file(&p, body)?;
    written.push(p);
    Ok(())
}

fn train(a: &TrainArgs) -> Result<Vec<PathBuf>> {
    let (cfg, train_set, eval_set) = load_config(&a.config)?;
    match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            trainer::resume(&cfg, &ck, &train_set, &eval_set, Some(&a.out))?;
        }
        None => {
            trainer::train(&cfg, &train_set, &eval_set, Some(&a.out))?;
        }
    }
    Ok(vec![a.out.join(trainer::METRICS_FILE)])
}

fn ablate(a: &AblateArgs) -> Result<Vec<PathBuf>> {
    let (cfg, _, eval_set) = load_config(&a.common.config)?;
    let cks = load_checkpoints(&a.common.checkpoints, &cfg)?;
    let modules = cks[0].spec.num_modules();
    if a.module >= modules {
        return Err(Error::Config(format!("--module {} out of range (network has {modules})", a.module)));
    }
    let ordering = match a.ordering {
        OrderingArg::Selective => AblationOrdering::Selective,
        OrderingArg::Random => AblationOrdering::Random,
    };
    let opts = SweepOptions {
        module: a.module,
        orderings: vec![ordering],
        steps: a.steps,
        random_seeds: (0..a.seeds).collect(),
        batch_size: cfg.run.eval_batch_size,
        scope: a.scope(),
    };
    let (curves, rows) = ablation::auc_over_epochs(&cks, &eval_set, &opts).map_err(|e| match e {
        Error::Plan(m) => Error::Config(m),
        other => other,
    })?;
    create(&a.common.out)?;
    let suffix = if a.per_block { "_block" } else { "" };
    let mut written = Vec::new();
    for c in &curves {
        let name = match c.seed {
            Some(s) => format!("curve_{}_m{}_{}{suffix}_s{}.csv", c.checkpoint_id(), c.module, c.ordering, s),
            None => format!("curve_{}_m{}_{}{suffix}.csv", c.checkpoint_id(), c.module, c.ordering),
        };
        write(&a.common.out, &name, &report::curve_csv(std::slice::from_ref(c)), &mut written)?;
    }
    write(
        &a.common.out,
        &format!("auc_m{}_{}{suffix}.csv", a.module, ordering),
        &report::auc_csv(&rows),
        &mut written,
    )?;
    Ok(written)
}

fn si(a: &CheckpointArgs) -> Result<Vec<PathBuf>> {
    let (cfg, _, eval_set) = load_config(&a.config)?;
    let cks = load_checkpoints(&a.checkpoints, &cfg)?;
    let mut reports = Vec::new();
    for ck in &cks {
        let (_, r) = trainer::evaluate_with_selectivity(&ck.model()?, &eval_set, cfg.run.eval_batch_size)?;
        reports.push((ck.meta, r));
    }
    let view: Vec<_> = reports.iter().map(|(m, r)| (*m, r)).collect();
    create(&a.out)?;
    let mut written = Vec::new();
    write(&a.out, "si.csv", &report::si_csv(&view), &mut written)?;
    Ok(written)
}

fn cka_cmd(a: &CkaArgs) -> Result<Vec<PathBuf>> {
    let (cfg, _, eval_set) = load_config(&a.common.config)?;
    let cks = load_checkpoints(&a.common.checkpoints, &cfg)?;
    let features = if a.flatten { Features::Flattened } else { Features::Pooled };
    let mut entries = Vec::new();
    for ck in &cks {
        let spec = &ck.spec;
        let sites: Vec<Site> = match a.sites {
            SitesArg::Taps => spec.taps().into_iter().map(Site::Tap).collect(),
            SitesArg::Modules => (0..spec.num_modules())
                .map(Site::ModuleOutput)
                .chain([Site::Logits])
                .collect(),
        };
        let m = cka::cka_matrix(&ck.model()?, &eval_set, &sites, features, cfg.run.eval_batch_size)?;
        entries.push((ck.meta, sites, m));
    }
    let view: Vec<_> = entries.iter().map(|(m, s, c)| (*m, s.as_slice(), c.as_slice())).collect();
    create(&a.common.out)?;
    let mut written = Vec::new();
    write(&a.common.out, "cka.csv", &report::cka_csv(&view), &mut written)?;
    Ok(written)
}

fn balance(a: &BalanceArgs) -> Result<Vec<PathBuf>> {
    let (cfg, _, eval_set) = load_config(&a.common.config)?;
    let cks = load_checkpoints(&a.common.checkpoints, &cfg)?;
    if a.k == 0 || a.k > cfg.architecture.num_classes {
        return Err(Error::Config(format!(
            "--k must lie in 1..={}",
            cfg.architecture.num_classes
        )));
    }
    let mut evals = Vec::new();
    for ck in &cks {
        evals.push((ck.meta, trainer::evaluate(&ck.model()?, &eval_set, cfg.run.eval_batch_size)?));
    }
    let view: Vec<_> = evals
        .iter()
        .map(|(m, e)| (*m, e.accuracy, e.counts.as_slice()))
        .collect();
    create(&a.common.out)?;
    let mut written = Vec::new();
    write(&a.common.out, "balance.csv", &report::balance_csv(&view, a.k)?, &mut written)?;
    Ok(written)
}

fn report_cmd(a: &ReportArgs) -> Result<Vec<PathBuf>> {
    if !a.run.join(trainer::METRICS_FILE).is_file() {
        return Err(Error::Config(format!(
            "{} is not a run directory (no {})",
            a.run.display(),
            trainer::METRICS_FILE
        )));
    }
    let config = a.config.clone().unwrap_or_else(|| a.run.join(trainer::CONFIG_FILE));
    let (cfg, _, eval_set) = load_config(&config)?;
    let opts = ReportOptions {
        ablation_modules: a.modules.clone(),
        steps: a.steps,
        random_seeds: (0..a.seeds).collect(),
        batch_size: cfg.run.eval_batch_size,
        ..ReportOptions::default()
    };
    if let Some(&m) = a.modules.iter().find(|&&m| m >= cfg.architecture.num_modules()) {
        return Err(Error::Config(format!("--module {m} out of range")));
    }
    report::write_report(&a.run, &eval_set, &a.out, &opts).map_err(|e| match e {
        Error::Plan(m) => Error::Config(m),
        other => other,
    })
}
