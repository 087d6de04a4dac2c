//! CSV emitters and the plot-ready per-figure data of a training run.
//!
//! Every file starts with a header row. Floats are written in Rust's
//! shortest round-trip form, so identical inputs give identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::ablation::{self, AblationCurve, AblationOrdering, AucRow, Scope, SweepOptions};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::cka::{self, Features};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Site;
use crate::selectivity::SelectivityReport;
use crate::trainer::{self, RunMetrics, METRICS_FILE};

pub const SI_HEADER: &str = "epoch,batch_index,module,block,channel,si,mu_max,argmax_class";
pub const CURVE_HEADER: &str = "checkpoint_id,epoch,batch_index,module,ordering,seed,step_fraction,raw_acc,norm_acc";
pub const AUC_HEADER: &str = "epoch,module,ordering,auc,ci_low,ci_high";
pub const CKA_HEADER: &str = "epoch,tap_a,tap_b,cka";

pub fn si_csv(entries: &[(CheckpointMeta, &SelectivityReport)]) -> String {
    let mut out = format!("{SI_HEADER}\n");
    for (meta, report) in entries {
        for (tap, records) in &report.taps {
            for (ch, r) in records.iter().enumerate() {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    meta.epoch, meta.batch_index, tap.module, tap.block, ch, r.si, r.mu_max, r.argmax_class
                )
                .unwrap();
            }
        }
    }
    out
}

pub fn curve_csv(curves: &[AblationCurve]) -> String {
    let mut out = format!("{CURVE_HEADER}\n");
    for c in curves {
        let seed = c.seed.map(|s| s.to_string()).unwrap_or_default();
        for p in &c.points {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                c.checkpoint_id(),
                c.checkpoint.epoch,
                c.checkpoint.batch_index,
                c.module,
                c.ordering,
                seed,
                p.fraction,
                p.raw_acc,
                p.norm_acc
            )
            .unwrap();
        }
    }
    out
}

pub fn auc_csv(rows: &[AucRow]) -> String {
    let mut out = format!("{AUC_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.checkpoint.epoch, r.module, r.ordering, r.auc, r.ci_low, r.ci_high
        )
        .unwrap();
    }
    out
}

/// One checkpoint's CKA matrix over `sites`.
pub type CkaEntry<'a> = (CheckpointMeta, &'a [Site], &'a [Vec<f64>]);

/// Off-diagonal upper-triangle entries of each matrix.
pub fn cka_csv(entries: &[CkaEntry<'_>]) -> String {
    let mut out = format!("{CKA_HEADER}\n");
    for (meta, sites, m) in entries {
        for i in 0..sites.len() {
            for j in i + 1..sites.len() {
                writeln!(out, "{},{},{},{}", meta.epoch, sites[i], sites[j], m[i][j]).unwrap();
            }
        }
    }
    out
}

/// Prediction histogram of each checkpoint plus the mean of its `k` largest
/// entries.
pub fn balance_csv(entries: &[(CheckpointMeta, f64, &[usize])], k: usize) -> Result<String> {
    let classes = entries.first().map_or(0, |e| e.2.len());
    let mut out = String::from("epoch,batch_index,eval_acc,top_k,top_k_mean");
    for c in 0..classes {
        write!(out, ",count_{c}").unwrap();
    }
    out.push('\n');
    for (meta, acc, counts) in entries {
        write!(
            out,
            "{},{},{},{},{}",
            meta.epoch,
            meta.batch_index,
            acc,
            k,
            trainer::class_balance(counts, k)?
        )
        .unwrap();
        for c in counts.iter() {
            write!(out, ",{c}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Checkpoint files in `dir`, in training order.
pub fn checkpoints_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    // ids are zero-padded, so name order is training order
    found.sort();
    Ok(found)
}

/// Settings for [`write_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportOptions {
    /// Modules to ablate; empty skips the AUC figure.
    pub ablation_modules: Vec<usize>,
    pub steps: usize,
    pub random_seeds: Vec<u64>,
    pub features: Features,
    pub batch_size: usize,
    /// Only end-of-epoch checkpoints enter the AUC and CKA figures.
    pub epoch_checkpoints_only: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            ablation_modules: Vec::new(),
            steps: 10,
            random_seeds: vec![0, 1, 2],
            features: Features::Pooled,
            batch_size: 256,
            epoch_checkpoints_only: true,
        }
    }
}

pub const ACCURACY_FILE: &str = "accuracy_trace.csv";
pub const SELECTIVITY_FILE: &str = "selectivity_vs_epoch.csv";
pub const AUC_FILE: &str = "auc_vs_epoch.csv";
pub const CKA_FILE: &str = "cka_vs_epoch.csv";

/// Writes the per-figure data files for the run stored in `run_dir` into
/// `out_dir` and returns their paths.
///
/// * accuracy traces and the class-balance diagnostic, from the metrics log
/// * mean SI per module against training position, from the metrics log
/// * ablation AUC per module against epoch, recomputed from checkpoints
/// * CKA between module outputs and the logits against epoch
pub fn write_report(run_dir: &Path, eval_set: &Dataset, out_dir: &Path, opts: &ReportOptions) -> Result<Vec<PathBuf>> {
    let metrics_path = run_dir.join(METRICS_FILE);
    let text = fs::read_to_string(&metrics_path)
        .map_err(|_| Error::Config(format!("{} has no {METRICS_FILE}; not a run directory", run_dir.display())))?;
    let metrics = RunMetrics::from_jsonl(&text)?;
    if metrics.records.is_empty() {
        return Err(Error::Config(format!("{} is empty", metrics_path.display())));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();

    let mut acc = String::from("epoch,batch_index,train_loss,train_acc,eval_acc,reg_mu_si,top5_class_count,regularizer_active\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut sel = String::from("epoch,batch_index,module,mean_si\n");
    for r in &metrics.records {
        writeln!(
            acc,
            "{},{},{},{},{},{},{},{}",
            r.epoch,
            r.batch_index,
            opt(r.train_loss),
            opt(r.train_acc),
            r.eval_acc,
            opt(r.reg_mu_si),
            r.top5_class_count,
            r.regularizer_active
        )
        .unwrap();
        for (m, si) in r.mean_si.iter().enumerate() {
            writeln!(sel, "{},{},{},{}", r.epoch, r.batch_index, m, si).unwrap();
        }
    }
    for (name, body) in [(ACCURACY_FILE, acc), (SELECTIVITY_FILE, sel)] {
        let p = out_dir.join(name);
        write_file(&p, &body)?;
        written.push(p);
    }

    let mut checkpoints = checkpoints_in(run_dir)?
        .iter()
        .map(|p| Checkpoint::load(p))
        .collect::<Result<Vec<_>>>()?;
    if opts.epoch_checkpoints_only {
        // the last checkpoint of each epoch is the end-of-epoch one
        let mut keep: Vec<Checkpoint> = Vec::new();
        for ck in checkpoints {
            match keep.last_mut() {
                Some(last) if last.meta.epoch == ck.meta.epoch => *last = ck,
                _ => keep.push(ck),
            }
        }
        checkpoints = keep;
    }

    if !opts.ablation_modules.is_empty() && !checkpoints.is_empty() {
        let mut rows = Vec::new();
        for &module in &opts.ablation_modules {
            let sweep = SweepOptions {
                module,
                orderings: vec![AblationOrdering::Selective, AblationOrdering::Random],
                steps: opts.steps,
                random_seeds: opts.random_seeds.clone(),
                batch_size: opts.batch_size,
                scope: Scope::Module,
            };
            rows.extend(ablation::auc_over_epochs(&checkpoints, eval_set, &sweep)?.1);
        }
        rows.sort_by_key(|a| (a.checkpoint, a.module, a.ordering));
        let p = out_dir.join(AUC_FILE);
        write_file(&p, &auc_csv(&rows))?;
        written.push(p);
    }

    if !checkpoints.is_empty() {
        let mut entries = Vec::new();
        for ck in &checkpoints {
            let model = ck.model()?;
            let mut sites: Vec<Site> = (0..ck.spec.num_modules()).map(Site::ModuleOutput).collect();
            sites.push(Site::Logits);
            let m = cka::cka_matrix(&model, eval_set, &sites, opts.features, opts.batch_size)?;
            entries.push((ck.meta, sites, m));
        }
        let view: Vec<CkaEntry<'_>> =
            entries.iter().map(|(m, s, c)| (*m, s.as_slice(), c.as_slice())).collect();
        let p = out_dir.join(CKA_FILE);
        write_file(&p, &cka_csv(&view))?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ablation::CurvePoint;
    use crate::model::TapId;
    use crate::selectivity::SelectivityRecord;

    fn meta(epoch: usize, batch_index: usize) -> CheckpointMeta {
        CheckpointMeta {
            epoch,
            batch_index,
            seed: 0,
        }
    }

    #[test]
    fn si_rows() {
        let mut r = SelectivityReport::default();
        let rec = SelectivityRecord {
            si: 0.5,
            mu_max: 0.6,
            mu_neg_max: 0.2,
            argmax_class: 1,
        };
        r.taps.insert(TapId { module: 0, block: 1 }, vec![rec; 2]);
        let csv = si_csv(&[(meta(3, 10), &r)]);
        assert_eq!(csv, format!("{SI_HEADER}\n3,10,0,1,0,0.5,0.6,1\n3,10,0,1,1,0.5,0.6,1\n"));
    }

    #[test]
    fn curve_and_auc_rows() {
        let curve = AblationCurve {
            checkpoint: meta(1, 5),
            module: 2,
            ordering: AblationOrdering::Random,
            seed: Some(4),
            points: vec![CurvePoint {
                fraction: 0.0,
                ablated: 0,
                raw_acc: 0.5,
                norm_acc: 100.0,
            }],
        };
        assert_eq!(
            curve_csv(&[curve]),
            format!("{CURVE_HEADER}\nckpt_e001_b00005,1,5,2,random,4,0,0.5,100\n")
        );
        let row = AucRow {
            checkpoint: meta(1, 5),
            module: 2,
            ordering: AblationOrdering::Selective,
            auc: 300.0,
            ci_low: 300.0,
            ci_high: 300.0,
        };
        assert_eq!(auc_csv(&[row]), format!("{AUC_HEADER}\n1,2,selective,300,300,300\n"));
    }

    #[test]
    fn cka_rows_are_off_diagonal() {
        let sites = [Site::ModuleOutput(0), Site::ModuleOutput(1), Site::Logits];
        let m = vec![vec![1.0, 0.5, 0.25], vec![0.5, 1.0, 0.75], vec![0.25, 0.75, 1.0]];
        let csv = cka_csv(&[(meta(0, 3), &sites, &m)]);
        assert_eq!(csv.lines().count(), 1 + 3);
    }

    #[test]
    fn balance_rows() {
        let counts = [7, 3, 9, 1, 5, 5, 0, 0, 0, 0];
        let csv = balance_csv(&[(meta(0, 1), 0.5, &counts)], 5).unwrap();
        assert!(csv.lines().nth(1).unwrap().starts_with("0,1,0.5,5,5.8,7,3,9"));
    }
}
