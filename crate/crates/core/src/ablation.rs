//! Progressive channel ablation: order the units of one module, zero a
//! growing prefix of that order, and record how accuracy falls.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{AblationMask, ArchitectureSpec, Model, TapId};
use crate::selectivity::SelectivityReport;
use crate::trainer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AblationOrdering {
    Selective,
    Random,
}

impl fmt::Display for AblationOrdering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationOrdering::Selective => "selective",
            AblationOrdering::Random => "random",
        })
    }
}

impl FromStr for AblationOrdering {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "selective" => Ok(AblationOrdering::Selective),
            "random" => Ok(AblationOrdering::Random),
            other => Err(Error::Config(format!("unknown ordering {other:?}; expected selective or random"))),
        }
    }
}

/// A unit is one channel of one block's tap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Unit {
    pub block: usize,
    pub channel: usize,
}

/// Whether units are ranked across the whole module or within each block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Scope {
    #[default]
    Module,
    Block,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationPlan {
    pub target_module: usize,
    pub ordering: AblationOrdering,
    pub units: Vec<Unit>,
    pub fraction_steps: Vec<f64>,
    /// Shuffle seed; `None` for selective plans.
    pub rng_seed: Option<u64>,
}

fn module_units(spec: &ArchitectureSpec, module: usize) -> Result<Vec<Unit>> {
    if module >= spec.num_modules() {
        return Err(Error::Config(format!(
            "module {module} out of range (network has {})",
            spec.num_modules()
        )));
    }
    let channels = spec.channels_per_module[module];
    Ok((0..spec.blocks_per_module[module])
        .flat_map(|block| (0..channels).map(move |channel| Unit { block, channel }))
        .collect())
}

/// Builds the unit order for `module`.
///
/// Selective plans sort by SI descending, ties by `(block, channel)`;
/// random plans shuffle the units with a generator seeded by `seed`.
/// The step grid is `0, 1/steps, …, 1`.
pub fn make_plan(
    spec: &ArchitectureSpec,
    si: Option<&SelectivityReport>,
    module: usize,
    ordering: AblationOrdering,
    steps: usize,
    seed: u64,
) -> Result<AblationPlan> {
    if steps < 2 {
        return Err(Error::Plan(format!("need at least 2 steps, got {steps}")));
    }
    let mut units = module_units(spec, module)?;
    let rng_seed = match ordering {
        AblationOrdering::Selective => {
            let report = si.ok_or_else(|| Error::Plan("selective ordering needs SI records".into()))?;
            let mut keyed = Vec::with_capacity(units.len());
            for u in units {
                let tap = TapId {
                    module,
                    block: u.block,
                };
                let rec = report
                    .get(tap, u.channel)
                    .ok_or_else(|| Error::Plan(format!("no SI record for {tap} channel {}", u.channel)))?;
                keyed.push((rec.si, u));
            }
            keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            units = keyed.into_iter().map(|(_, u)| u).collect();
            None
        }
        AblationOrdering::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            units.shuffle(&mut rng);
            Some(seed)
        }
    };
    let fraction_steps = (0..=steps).map(|i| i as f64 / steps as f64).collect();
    Ok(AblationPlan {
        target_module: module,
        ordering,
        units,
        fraction_steps,
        rng_seed,
    })
}

impl AblationPlan {
    /// Replaces the step grid; it must start at 0, end at 1 and increase.
    pub fn with_fractions(mut self, fractions: Vec<f64>) -> Result<Self> {
        let ok = fractions.len() >= 2
            && fractions[0] == 0.0
            && *fractions.last().unwrap() == 1.0
            && fractions.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(Error::Plan(format!("invalid fraction grid {fractions:?}")));
        }
        self.fraction_steps = fractions;
        Ok(self)
    }

    /// Interleaves the blocks so each gives up units at the same rate: the
    /// i-th unit of every block (in the current order) comes before the
    /// (i+1)-th unit of any block.
    pub fn per_block(mut self) -> Self {
        let mut seen = std::collections::BTreeMap::new();
        let mut keyed: Vec<(usize, usize, Unit)> = self
            .units
            .iter()
            .map(|&u| {
                let rank = seen.entry(u.block).or_insert(0usize);
                *rank += 1;
                (*rank, u.block, u)
            })
            .collect();
        keyed.sort_by_key(|&(rank, block, _)| (rank, block));
        self.units = keyed.into_iter().map(|(_, _, u)| u).collect();
        self
    }

    /// Number of ablated units at each step, `⌊fraction·total⌋`.
    pub fn ablated_counts(&self) -> Vec<usize> {
        let total = self.units.len();
        self.fraction_steps
            .iter()
            // guards products like 0.7·10 = 7.000000000000001 from both sides
            .map(|f| ((f * total as f64) + 1e-9).floor().min(total as f64) as usize)
            .collect()
    }

    /// Mask zeroing the first `count` units of the order.
    pub fn mask(&self, spec: &ArchitectureSpec, count: usize) -> Result<AblationMask> {
        let mut mask = AblationMask::all_false(spec);
        for u in &self.units[..count.min(self.units.len())] {
            mask.ablate(
                spec,
                TapId {
                    module: self.target_module,
                    block: u.block,
                },
                u.channel,
            )?;
        }
        Ok(mask)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub fraction: f64,
    pub ablated: usize,
    pub raw_acc: f64,
    pub norm_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCurve {
    pub checkpoint: CheckpointMeta,
    pub module: usize,
    pub ordering: AblationOrdering,
    pub seed: Option<u64>,
    pub points: Vec<CurvePoint>,
}

impl AblationCurve {
    pub fn checkpoint_id(&self) -> String {
        self.checkpoint.id()
    }
}

/// Evaluates `model` at every step of `plan`. Step 0 is a plain evaluation;
/// accuracies are normalized to 100 at step 0.
pub fn run_curve(
    model: &Model,
    checkpoint: CheckpointMeta,
    plan: &AblationPlan,
    eval_set: &Dataset,
    batch_size: usize,
) -> Result<AblationCurve> {
    let spec = model.spec();
    let mut points = Vec::with_capacity(plan.fraction_steps.len());
    let mut baseline = None;
    for (&fraction, ablated) in plan.fraction_steps.iter().zip(plan.ablated_counts()) {
        let raw_acc = if ablated == 0 {
            trainer::evaluate(model, eval_set, batch_size)?.accuracy
        } else {
            let mask = plan.mask(spec, ablated)?;
            masked_accuracy(model, eval_set, &mask, batch_size)?
        };
        let base = *baseline.get_or_insert(raw_acc);
        if base == 0.0 {
            return Err(Error::Normalization(format!(
                "unablated accuracy at {} is 0",
                checkpoint.id()
            )));
        }
        points.push(CurvePoint {
            fraction,
            ablated,
            raw_acc,
            norm_acc: 100.0 * raw_acc / base,
        });
    }
    Ok(AblationCurve {
        checkpoint,
        module: plan.target_module,
        ordering: plan.ordering,
        seed: plan.rng_seed,
        points,
    })
}

fn masked_accuracy(model: &Model, eval_set: &Dataset, mask: &AblationMask, batch_size: usize) -> Result<f64> {
    let mut correct = 0;
    for batch in eval_set.sequential_batches(batch_size) {
        let (images, labels) = batch?;
        let logits = model.logits(&images, Some(mask))?;
        correct += trainer::predictions(&logits)
            .into_iter()
            .zip(&labels)
            .filter(|(p, l)| p == *l)
            .count();
    }
    Ok(correct as f64 / eval_set.len() as f64)
}

/// Plain sum of the normalized accuracies.
pub fn auc(curve: &AblationCurve) -> f64 {
    auc_of(curve.points.iter().map(|p| p.norm_acc))
}

pub fn auc_of(norm_acc: impl IntoIterator<Item = f64>) -> f64 {
    norm_acc.into_iter().sum()
}

/// Mean and 95% Student-t confidence interval of the mean.
pub fn mean_ci95(values: &[f64]) -> Result<(f64, f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Plan(format!("a confidence interval needs at least 2 values, got {n}")));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| Error::Plan(e.to_string()))?
        .inverse_cdf(0.975);
    let half = t * (var / n as f64).sqrt();
    Ok((mean, mean - half, mean + half))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AucRow {
    pub checkpoint: CheckpointMeta,
    pub module: usize,
    pub ordering: AblationOrdering,
    pub auc: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

pub const MIN_RANDOM_SEEDS: usize = 3;

/// Ablation settings shared by every checkpoint of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepOptions {
    pub module: usize,
    pub orderings: Vec<AblationOrdering>,
    pub steps: usize,
    pub random_seeds: Vec<u64>,
    pub batch_size: usize,
    pub scope: Scope,
}

/// Curves and AUC rows for every checkpoint. Selective orderings use SI
/// computed at the same checkpoint; random AUC is the mean over seeds with
/// a 95% interval. Output is sorted by checkpoint position, so it does not
/// depend on the order of `checkpoints`.
pub fn auc_over_epochs(
    checkpoints: &[Checkpoint],
    eval_set: &Dataset,
    opts: &SweepOptions,
) -> Result<(Vec<AblationCurve>, Vec<AucRow>)> {
    if checkpoints.is_empty() {
        return Err(Error::Plan("no checkpoints to ablate".into()));
    }
    if opts.orderings.contains(&AblationOrdering::Random) && opts.random_seeds.len() < MIN_RANDOM_SEEDS {
        return Err(Error::Plan(format!(
            "random ordering needs at least {MIN_RANDOM_SEEDS} seeds, got {}",
            opts.random_seeds.len()
        )));
    }
    let mut sorted: Vec<&Checkpoint> = checkpoints.iter().collect();
    sorted.sort_by_key(|c| c.meta);

    let per_ckpt: Vec<(Vec<AblationCurve>, Vec<AucRow>)> = sorted
        .par_iter()
        .map(|ck| sweep_one(ck, eval_set, opts))
        .collect::<Result<_>>()?;
    let mut curves = Vec::new();
    let mut rows = Vec::new();
    for (c, r) in per_ckpt {
        curves.extend(c);
        rows.extend(r);
    }
    Ok((curves, rows))
}

fn sweep_one(ck: &Checkpoint, eval_set: &Dataset, opts: &SweepOptions) -> Result<(Vec<AblationCurve>, Vec<AucRow>)> {
    let model = ck.model()?;
    let spec = model.spec();
    let scoped = |plan: AblationPlan| match opts.scope {
        Scope::Module => plan,
        Scope::Block => plan.per_block(),
    };
    let mut curves = Vec::new();
    let mut rows = Vec::new();
    for &ordering in &opts.orderings {
        match ordering {
            AblationOrdering::Selective => {
                let (_, si) = trainer::evaluate_with_selectivity(&model, eval_set, opts.batch_size)?;
                let plan = scoped(make_plan(spec, Some(&si), opts.module, ordering, opts.steps, 0)?);
                let curve = run_curve(&model, ck.meta, &plan, eval_set, opts.batch_size)?;
                let a = auc(&curve);
                rows.push(AucRow {
                    checkpoint: ck.meta,
                    module: opts.module,
                    ordering,
                    auc: a,
                    ci_low: a,
                    ci_high: a,
                });
                curves.push(curve);
            }
            AblationOrdering::Random => {
                let mut aucs = Vec::new();
                for &seed in &opts.random_seeds {
                    let plan = scoped(make_plan(spec, None, opts.module, ordering, opts.steps, seed)?);
                    let curve = run_curve(&model, ck.meta, &plan, eval_set, opts.batch_size)?;
                    aucs.push(auc(&curve));
                    curves.push(curve);
                }
                let (mean, lo, hi) = mean_ci95(&aucs)?;
                rows.push(AucRow {
                    checkpoint: ck.meta,
                    module: opts.module,
                    ordering,
                    auc: mean,
                    ci_low: lo,
                    ci_high: hi,
                });
            }
        }
    }
    Ok((curves, rows))
}
