//! Class selectivity of individual channels.
//!
//! For a unit with class-conditional mean activations `μ_c` (spatially
//! averaged, then averaged over the samples of class `c`):
//!
//! ```text
//! μ_max  = max_c μ_c                    (ties → lowest class index)
//! μ_-max = mean of the remaining classes' μ_c
//! SI     = (μ_max − μ_-max) / (μ_max + μ_-max + ε),   ε = 1e-6
//! ```
//!
//! Two routes compute it: [`ClassMeanAccumulator`] streams over an
//! evaluation set for reporting, and [`regularizer_mu_si`] builds the same
//! quantity on the autodiff graph from batch-local class means so it can be
//! added to the training loss.

use std::collections::{BTreeMap, BTreeSet};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{ArchitectureSpec, Site, TapCapture, TapId};
use crate::tensor::Tensor;

/// Denominator guard for dead units.
pub const SI_EPSILON: f64 = 1e-6;

/// Selectivity of one unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectivityRecord {
    pub si: f64,
    pub mu_max: f64,
    pub mu_neg_max: f64,
    pub argmax_class: usize,
}

impl SelectivityRecord {
    /// Evaluates the index from a full vector of class means (`len ≥ 2`).
    pub fn from_class_means(means: &[f64]) -> Result<Self> {
        if means.len() < 2 {
            return Err(Error::Statistics("selectivity needs at least two classes".into()));
        }
        let mut argmax = 0;
        for (c, &m) in means.iter().enumerate().skip(1) {
            if m > means[argmax] {
                argmax = c;
            }
        }
        let mu_max = means[argmax];
        let rest: f64 = means
            .iter()
            .enumerate()
            .filter(|&(c, _)| c != argmax)
            .map(|(_, &m)| m)
            .sum();
        let mu_neg_max = rest / (means.len() - 1) as f64;
        Ok(SelectivityRecord {
            si: (mu_max - mu_neg_max) / (mu_max + mu_neg_max + SI_EPSILON),
            mu_max,
            mu_neg_max,
            argmax_class: argmax,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
struct TapSums {
    channels: usize,
    /// `[num_classes × channels]`, row-major.
    sums: Vec<f64>,
    counts: Vec<u64>,
}

impl TapSums {
    fn new(num_classes: usize, channels: usize) -> Self {
        TapSums {
            channels,
            sums: vec![0.0; num_classes * channels],
            counts: vec![0; num_classes],
        }
    }
}

/// Running class-conditional sums of spatially averaged activations, per tap.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMeanAccumulator {
    num_classes: usize,
    taps: BTreeMap<TapId, TapSums>,
}

impl ClassMeanAccumulator {
    /// Accumulator whose taps are registered on first use.
    pub fn new(num_classes: usize) -> Self {
        ClassMeanAccumulator {
            num_classes,
            taps: BTreeMap::new(),
        }
    }

    /// Accumulator pre-registered with every tap of an architecture, so that
    /// channel mismatches are caught on the first batch.
    pub fn for_spec(spec: &ArchitectureSpec) -> Self {
        let taps = spec
            .taps()
            .into_iter()
            .map(|t| (t, TapSums::new(spec.num_classes, spec.channels_per_module[t.module])))
            .collect();
        ClassMeanAccumulator {
            num_classes: spec.num_classes,
            taps,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn taps(&self) -> impl Iterator<Item = TapId> + '_ {
        self.taps.keys().copied()
    }

    pub fn counts(&self, tap: TapId) -> Option<&[u64]> {
        self.taps.get(&tap).map(|t| t.counts.as_slice())
    }

    pub fn sums(&self, tap: TapId) -> Option<&[f64]> {
        self.taps.get(&tap).map(|t| t.sums.as_slice())
    }

    /// Adds one batch of tap activations `[N, C, H, W]` with their labels.
    pub fn accumulate(&mut self, capture: &TapCapture, labels: &[usize]) -> Result<()> {
        let Site::Tap(tap) = capture.site else {
            return Err(Error::Contract(format!("{} is not a block tap", capture.site)));
        };
        let act = &capture.activations;
        let s = act.shape();
        if s.len() != 4 || s[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "capture {s:?} does not match {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::Index(format!("label {bad} out of range for {} classes", self.num_classes)));
        }
        if act.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Contract(format!("negative activation at {tap}; taps must be post-ReLU")));
        }
        let (channels, hw) = (s[1], s[2] * s[3]);
        let k = self.num_classes;
        let entry = self.taps.entry(tap).or_insert_with(|| TapSums::new(k, channels));
        if entry.channels != channels {
            return Err(Error::Dimension(format!(
                "tap {tap} accumulates {} channels, capture has {channels}",
                entry.channels
            )));
        }
        let inv = 1.0 / hw as f64;
        for (n, &label) in labels.iter().enumerate() {
            let row = &mut entry.sums[label * channels..(label + 1) * channels];
            for (c, slot) in row.iter_mut().enumerate() {
                let start = (n * channels + c) * hw;
                *slot += act.data()[start..start + hw].iter().sum::<f64>() * inv;
            }
            entry.counts[label] += 1;
        }
        Ok(())
    }

    /// Entrywise sum of two accumulators.
    pub fn merge(&mut self, other: &ClassMeanAccumulator) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Dimension("cannot merge accumulators over different class counts".into()));
        }
        for (&tap, theirs) in &other.taps {
            let k = self.num_classes;
            let mine = self.taps.entry(tap).or_insert_with(|| TapSums::new(k, theirs.channels));
            if mine.channels != theirs.channels {
                return Err(Error::Dimension(format!("channel count mismatch at {tap}")));
            }
            mine.sums.iter_mut().zip(&theirs.sums).for_each(|(a, b)| *a += b);
            mine.counts.iter_mut().zip(&theirs.counts).for_each(|(a, b)| *a += b);
        }
        Ok(())
    }

    /// Class-conditional means `[num_classes × channels]` for one tap.
    pub fn class_means(&self, tap: TapId) -> Result<Vec<f64>> {
        let t = self
            .taps
            .get(&tap)
            .ok_or_else(|| Error::Statistics(format!("no activations recorded for {tap}")))?;
        if let Some(c) = t.counts.iter().position(|&n| n == 0) {
            return Err(Error::Statistics(format!("class {c} has no samples at {tap}; index undefined")));
        }
        Ok(t.sums
            .chunks_exact(t.channels)
            .zip(&t.counts)
            .flat_map(|(row, &n)| row.iter().map(move |&s| s / n as f64))
            .collect())
    }

    /// Selectivity of every unit of every tap.
    pub fn selectivity_index(&self) -> Result<SelectivityReport> {
        let mut taps = BTreeMap::new();
        for (&tap, t) in &self.taps {
            let means = self.class_means(tap)?;
            let records = (0..t.channels)
                .map(|c| {
                    let column: Vec<f64> = (0..self.num_classes).map(|k| means[k * t.channels + c]).collect();
                    SelectivityRecord::from_class_means(&column)
                })
                .collect::<Result<Vec<_>>>()?;
            taps.insert(tap, records);
        }
        Ok(SelectivityReport { taps })
    }
}

/// Selectivity records for every unit, keyed by tap.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SelectivityReport {
    pub taps: BTreeMap<TapId, Vec<SelectivityRecord>>,
}

impl SelectivityReport {
    pub fn get(&self, tap: TapId, channel: usize) -> Option<&SelectivityRecord> {
        self.taps.get(&tap).and_then(|r| r.get(channel))
    }

    pub fn unit_count(&self) -> usize {
        self.taps.values().map(Vec::len).sum()
    }

    /// Mean SI over the channels of one tap.
    pub fn tap_mean(&self, tap: TapId) -> Option<f64> {
        let r = self.taps.get(&tap)?;
        Some(r.iter().map(|x| x.si).sum::<f64>() / r.len() as f64)
    }

    /// Mean over the module's blocks of each block's channel-mean SI.
    pub fn module_mean(&self, module: usize) -> Option<f64> {
        let means: Vec<f64> = self
            .taps
            .keys()
            .filter(|t| t.module == module)
            .filter_map(|&t| self.tap_mean(t))
            .collect();
        (!means.is_empty()).then(|| means.iter().sum::<f64>() / means.len() as f64)
    }

    /// Mean over `modules` of [`SelectivityReport::module_mean`].
    pub fn modules_mean(&self, modules: &BTreeSet<usize>) -> Option<f64> {
        let means: Vec<f64> = modules.iter().filter_map(|&m| self.module_mean(m)).collect();
        (!means.is_empty() && means.len() == modules.len()).then(|| means.iter().sum::<f64>() / means.len() as f64)
    }
}

/// Differentiable mean selectivity over the targeted modules, computed from
/// the class means of the current batch.
///
/// Per tap: spatial mean per channel, class means over the classes present
/// in the batch, SI per channel, mean over channels; then mean over the
/// module's blocks, then mean over the targeted modules. The gradient of
/// `μ_max` flows only through the argmax class.
pub fn regularizer_mu_si(
    g: &mut Graph,
    captures: &[(Site, Var)],
    labels: &[usize],
    targeted_modules: &BTreeSet<usize>,
) -> Result<Var> {
    if targeted_modules.is_empty() {
        return Err(Error::Config("regularizer needs at least one targeted module".into()));
    }
    let present: BTreeSet<usize> = labels.iter().copied().collect();
    if present.len() < 2 {
        return Err(Error::Statistics(format!(
            "batch has {} distinct classes; selectivity needs at least 2",
            present.len()
        )));
    }
    let classes: Vec<usize> = present.into_iter().collect();
    let n = labels.len();
    let k = classes.len();
    let mut averaging = vec![0.0; k * n];
    for (row, &class) in classes.iter().enumerate() {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        let w = 1.0 / members.len() as f64;
        for i in members {
            averaging[row * n + i] = w;
        }
    }
    let averaging = g.constant(Tensor::from_parts(vec![k, n], averaging));

    let mut per_module: BTreeMap<usize, Vec<Var>> = BTreeMap::new();
    for &(site, act) in captures {
        let Site::Tap(tap) = site else { continue };
        if !targeted_modules.contains(&tap.module) {
            continue;
        }
        if g.value(act).shape().first() != Some(&n) {
            return Err(Error::Dimension(format!("capture at {tap} does not have {n} samples")));
        }
        let pooled = g.global_avg_pool(act)?;
        let means = g.matmul(averaging, pooled)?;
        let top = g.max_rows(means)?;
        let total = g.sum_over(means, &[0])?;
        let others = g.sub(total, top)?;
        let rest = g.scalar_mul(others, 1.0 / (k - 1) as f64)?;
        let num = g.sub(top, rest)?;
        let den = g.add(top, rest)?;
        let den = g.add_scalar(den, SI_EPSILON)?;
        let si = g.div(num, den)?;
        let block = g.mean_all(si)?;
        per_module.entry(tap.module).or_default().push(block);
    }

    let mut module_means = Vec::with_capacity(targeted_modules.len());
    for &m in targeted_modules {
        let blocks = per_module
            .get(&m)
            .ok_or_else(|| Error::Config(format!("no tap captures supplied for targeted module {m}")))?;
        module_means.push(mean_of_scalars(g, blocks)?);
    }
    mean_of_scalars(g, &module_means)
}

fn mean_of_scalars(g: &mut Graph, xs: &[Var]) -> Result<Var> {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = g.add(acc, x)?;
    }
    if xs.len() == 1 {
        Ok(acc)
    } else {
        g.scalar_mul(acc, 1.0 / xs.len() as f64)
    }
}

/// `loss = ce − α·μ_SI`. With `α = 0` or no `mu_si` the cross-entropy node
/// is returned unchanged, so the regularizer contributes nothing.
pub fn add_selectivity_term(g: &mut Graph, ce: Var, mu_si: Option<Var>, alpha: f64) -> Result<Var> {
    match mu_si {
        Some(mu) if alpha != 0.0 => {
            let term = g.scalar_mul(mu, -alpha)?;
            g.add(ce, term)
        }
        _ => Ok(ce),
    }
}

/// Cross-entropy of `logits` against `labels` with the selectivity term.
pub fn regularized_loss(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    mu_si: Option<Var>,
    alpha: f64,
) -> Result<Var> {
    let ce = g.softmax_cross_entropy(logits, labels)?;
    add_selectivity_term(g, ce, mu_si, alpha)
}
