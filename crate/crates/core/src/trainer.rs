//! Deterministic mini-batch SGD with an epoch-scheduled selectivity term,
//! periodic checkpoints and a JSON-lines metrics log.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::{ExperimentConfig, OptimizerConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Model, Site};
use crate::report;
use crate::selectivity::{self, ClassMeanAccumulator, SelectivityReport};
use crate::tensor::Tensor;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.toml";

/// SGD with momentum and L2 weight decay:
/// `v ← μ·v + g + λ·p`, `p ← p − lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub config: OptimizerConfig,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(config: OptimizerConfig, params: &[Tensor]) -> Self {
        let velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Sgd { config, velocity }
    }

    pub fn with_velocity(config: OptimizerConfig, velocity: Vec<Tensor>) -> Self {
        Sgd { config, velocity }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() {
            return Err(Error::Contract("optimizer, parameter and gradient counts differ".into()));
        }
        let OptimizerConfig {
            learning_rate: lr,
            momentum,
            weight_decay,
        } = self.config;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return Err(Error::Dimension(format!(
                    "parameter {:?}, gradient {:?} and velocity {:?} shapes differ",
                    p.shape(),
                    g.shape(),
                    v.shape()
                )));
            }
            for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = momentum * *vi + gi + weight_decay * *pi;
                *pi -= lr * *vi;
            }
            if p.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric("parameter update produced a non-finite value".into()));
            }
        }
        Ok(())
    }
}

/// One logged point of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub batch_index: usize,
    /// Mean training loss over the batches since the previous record.
    pub train_loss: Option<f64>,
    /// Training accuracy over the batches since the previous record.
    pub train_acc: Option<f64>,
    pub eval_acc: f64,
    /// Mean SI per module over the full evaluation set (reporting index).
    pub mean_si: Vec<f64>,
    /// Mean batch-local regularizer value `μ_SI` over the batches since the
    /// previous record; absent when the regularizer was inactive. Uses
    /// per-batch class means, so it differs from `mean_si`.
    pub reg_mu_si: Option<f64>,
    /// Mean of the five largest predicted-class counts on the evaluation set.
    pub top5_class_count: f64,
    pub regularizer_active: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetrics {
    pub records: Vec<MetricsRecord>,
}

impl RunMetrics {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("metrics serialize") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Config(format!("metrics line {}: {e}", i + 1)))
            })
            .collect::<Result<_>>()?;
        Ok(RunMetrics { records })
    }

    pub fn last(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }
}

/// Mean of the `k` largest entries of `counts`.
pub fn class_balance(counts: &[usize], k: usize) -> Result<f64> {
    if k == 0 || k > counts.len() {
        return Err(Error::Contract(format!("k = {k} must lie in 1..={}", counts.len())));
    }
    let mut sorted = counts.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    Ok(sorted[..k].iter().sum::<usize>() as f64 / k as f64)
}

/// Top-1 accuracy and predicted-class histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub counts: Vec<usize>,
}

/// Index of the largest logit per row; ties go to the lowest class.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Scores already-computed logits.
pub fn evaluate_logits(logits: &Tensor, labels: &[usize]) -> Result<Evaluation> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() || labels.is_empty() {
        return Err(Error::Dimension(format!(
            "logits {:?} do not match {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let mut counts = vec![0; logits.shape()[1]];
    let mut correct = 0;
    for (p, &l) in predictions(logits).into_iter().zip(labels) {
        counts[p] += 1;
        correct += usize::from(p == l);
    }
    Ok(Evaluation {
        accuracy: correct as f64 / labels.len() as f64,
        counts,
    })
}

pub fn evaluate(model: &Model, eval_set: &Dataset, batch_size: usize) -> Result<Evaluation> {
    Ok(evaluate_full(model, eval_set, batch_size, false)?.0)
}

/// Evaluation plus the reporting selectivity index of every tap, from one
/// pass over the set.
pub fn evaluate_with_selectivity(
    model: &Model,
    eval_set: &Dataset,
    batch_size: usize,
) -> Result<(Evaluation, SelectivityReport)> {
    let (ev, acc) = evaluate_full(model, eval_set, batch_size, true)?;
    Ok((ev, acc.expect("requested").selectivity_index()?))
}

fn evaluate_full(
    model: &Model,
    eval_set: &Dataset,
    batch_size: usize,
    with_si: bool,
) -> Result<(Evaluation, Option<ClassMeanAccumulator>)> {
    if eval_set.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let sites: Vec<Site> = if with_si {
        model.spec().taps().into_iter().map(Site::Tap).collect()
    } else {
        Vec::new()
    };
    let mut acc = with_si.then(|| ClassMeanAccumulator::for_spec(model.spec()));
    let mut counts = vec![0; model.spec().num_classes];
    let mut correct = 0;
    for batch in eval_set.sequential_batches(batch_size) {
        let (images, labels) = batch?;
        let (logits, captures) = model.forward(&images, None, &sites)?;
        for (p, &l) in predictions(&logits).into_iter().zip(&labels) {
            counts[p] += 1;
            correct += usize::from(p == l);
        }
        if let Some(acc) = acc.as_mut() {
            for c in &captures {
                acc.accumulate(c, &labels)?;
            }
        }
    }
    let ev = Evaluation {
        accuracy: correct as f64 / eval_set.len() as f64,
        counts,
    };
    Ok((ev, acc))
}

/// Seeded permutation of the training set for one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Number of full batches per epoch (at least one).
pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    (n / batch_size).max(1)
}

/// Outcome of a single optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub samples: usize,
    pub mu_si: Option<f64>,
}

/// Computes the loss on one batch, back-propagates and updates `model`.
pub fn train_step(
    model: &mut Model,
    sgd: &mut Sgd,
    images: &Tensor,
    labels: &[usize],
    regularizer: Option<(f64, &BTreeSet<usize>)>,
) -> Result<StepStats> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, true);
    let input = g.constant(images.clone());
    let sites: Vec<Site> = match regularizer {
        Some((_, modules)) => model
            .spec()
            .taps()
            .into_iter()
            .filter(|t| modules.contains(&t.module))
            .map(Site::Tap)
            .collect(),
        None => Vec::new(),
    };
    let out = model.forward_graph(&mut g, &params, input, None, &sites)?;
    let mu = match regularizer {
        Some((_, modules)) => Some(selectivity::regularizer_mu_si(&mut g, &out.captures, labels, modules)?),
        None => None,
    };
    let alpha = regularizer.map_or(0.0, |(a, _)| a);
    let loss = selectivity::regularized_loss(&mut g, out.logits, labels, mu, alpha)?;
    let loss_value = g.value(loss).item()?;
    g.backward(loss)?;
    let grads: Vec<Tensor> = params.iter().map(|&p| g.grad(p).expect("trainable")).collect();
    let correct = predictions(g.value(out.logits))
        .into_iter()
        .zip(labels)
        .filter(|(p, l)| p == *l)
        .count();
    let mu_si = mu.map(|m| g.value(m).data()[0]);
    sgd.step(model.params_mut(), &grads)?;
    Ok(StepStats {
        loss: loss_value,
        correct,
        samples: labels.len(),
        mu_si,
    })
}

#[derive(Debug, Default)]
struct Window {
    loss: f64,
    correct: usize,
    samples: usize,
    batches: usize,
    mu_si: f64,
    mu_batches: usize,
}

impl Window {
    fn add(&mut self, s: &StepStats) {
        self.loss += s.loss;
        self.correct += s.correct;
        self.samples += s.samples;
        self.batches += 1;
        if let Some(m) = s.mu_si {
            self.mu_si += m;
            self.mu_batches += 1;
        }
    }
}

/// Runs training as configured. When `out_dir` is given, the metrics log,
/// a copy of the config, checkpoints and per-checkpoint SI reports are
/// written there.
pub fn train(config: &ExperimentConfig, train_set: &Dataset, eval_set: &Dataset, out_dir: Option<&Path>) -> Result<RunMetrics> {
    config.validate()?;
    let model = Model::build(&config.architecture, config.run.seed)?;
    let sgd = Sgd::new(config.optimizer.clone(), model.param_tensors());
    if let Some(dir) = out_dir {
        let path = dir.join(METRICS_FILE);
        if path.exists() {
            fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
    }
    let mut run = Run::new(config, train_set, eval_set, out_dir, model, sgd)?;
    run.log_point(0, 0, &mut Window::default(), false)?;
    run.continue_from(0, 0)?;
    Ok(run.metrics)
}

/// Continues a run from a checkpoint written by [`train`]. Only the records
/// after the checkpoint are returned. An existing log in `out_dir` is cut
/// back to the checkpoint before new records are appended.
pub fn resume(
    config: &ExperimentConfig,
    checkpoint: &Checkpoint,
    train_set: &Dataset,
    eval_set: &Dataset,
    out_dir: Option<&Path>,
) -> Result<RunMetrics> {
    config.validate()?;
    if checkpoint.spec != config.architecture {
        return Err(Error::Checkpoint("checkpoint architecture differs from the config".into()));
    }
    if checkpoint.meta.seed != config.run.seed {
        return Err(Error::Checkpoint(format!(
            "checkpoint seed {} differs from config seed {}",
            checkpoint.meta.seed, config.run.seed
        )));
    }
    let model = checkpoint.model()?;
    let sgd = if checkpoint.velocity.is_empty() {
        Sgd::new(config.optimizer.clone(), model.param_tensors())
    } else {
        Sgd::with_velocity(config.optimizer.clone(), checkpoint.velocity.clone())
    };
    if let Some(dir) = out_dir {
        let path = dir.join(METRICS_FILE);
        if let Ok(text) = fs::read_to_string(&path) {
            // keep the original lines so the surviving prefix is byte-identical
            let at = (checkpoint.meta.epoch, checkpoint.meta.batch_index);
            let mut kept = String::new();
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let r = RunMetrics::from_jsonl(line)?;
                if r.records.iter().all(|r| (r.epoch, r.batch_index) <= at) {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
            fs::write(&path, kept).map_err(|e| Error::io(&path, e))?;
        }
    }
    let mut run = Run::new(config, train_set, eval_set, out_dir, model, sgd)?;
    let nb = batches_per_epoch(train_set.len(), config.run.batch_size);
    let (epoch, batch) = if checkpoint.meta.batch_index >= nb {
        (checkpoint.meta.epoch + 1, 0)
    } else {
        (checkpoint.meta.epoch, checkpoint.meta.batch_index)
    };
    run.continue_from(epoch, batch)?;
    Ok(run.metrics)
}

struct Run<'a> {
    config: &'a ExperimentConfig,
    train_set: &'a Dataset,
    eval_set: &'a Dataset,
    out_dir: Option<&'a Path>,
    model: Model,
    sgd: Sgd,
    metrics: RunMetrics,
}

impl<'a> Run<'a> {
    fn new(
        config: &'a ExperimentConfig,
        train_set: &'a Dataset,
        eval_set: &'a Dataset,
        out_dir: Option<&'a Path>,
        model: Model,
        sgd: Sgd,
    ) -> Result<Self> {
        let [c, h, w] = config.architecture.input_shape;
        for ds in [train_set, eval_set] {
            if ds.image_shape() != [c, h, w] {
                return Err(Error::Config(format!(
                    "dataset images are {:?}, architecture expects {:?}",
                    ds.image_shape(),
                    [c, h, w]
                )));
            }
            if ds.num_classes() != config.architecture.num_classes {
                return Err(Error::Config(format!(
                    "dataset has {} classes, architecture expects {}",
                    ds.num_classes(),
                    config.architecture.num_classes
                )));
            }
        }
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let cfg_path = dir.join(CONFIG_FILE);
            fs::write(&cfg_path, config.to_toml_string()).map_err(|e| Error::io(&cfg_path, e))?;
        }
        Ok(Run {
            config,
            train_set,
            eval_set,
            out_dir,
            model,
            sgd,
            metrics: RunMetrics::default(),
        })
    }

    fn continue_from(&mut self, start_epoch: usize, start_batch: usize) -> Result<()> {
        let run = &self.config.run;
        let nb = batches_per_epoch(self.train_set.len(), run.batch_size);
        let size = run.batch_size.min(self.train_set.len());
        let modules = self
            .config
            .schedule
            .as_ref()
            .map(|s| s.modules(&self.config.architecture));
        let mut window = Window::default();

        for epoch in start_epoch..run.epochs {
            let order = epoch_order(run.seed, epoch, self.train_set.len());
            let active = self.config.schedule.as_ref().filter(|s| s.is_active(epoch));
            let regularizer = active.map(|s| (s.alpha, modules.as_ref().expect("schedule present")));
            let first = if epoch == start_epoch { start_batch } else { 0 };
            for b in first..nb {
                let (images, labels) = self.train_set.batch(&order[b * size..(b + 1) * size])?;
                let stats = train_step(&mut self.model, &mut self.sgd, &images, &labels, regularizer)
                    .and_then(|s| {
                        if s.loss.is_finite() {
                            Ok(s)
                        } else {
                            Err(Error::Numeric(format!("loss is {}", s.loss)))
                        }
                    })
                    .map_err(|e| match e {
                        Error::Numeric(message) => Error::NonFiniteLoss { epoch, batch: b, message },
                        other => other,
                    })?;
                window.add(&stats);
                let done = b + 1;
                if done == nb || (run.sub_epoch_every > 0 && done % run.sub_epoch_every == 0) {
                    self.log_point(epoch, done, &mut window, active.is_some())?;
                }
            }
        }
        Ok(())
    }

    fn log_point(&mut self, epoch: usize, batch_index: usize, window: &mut Window, active: bool) -> Result<()> {
        let (ev, si) = evaluate_with_selectivity(&self.model, self.eval_set, self.config.run.eval_batch_size)?;
        let spec = &self.config.architecture;
        let mean_si = (0..spec.num_modules())
            .map(|m| si.module_mean(m).unwrap_or(0.0))
            .collect();
        let k = 5.min(spec.num_classes);
        let w = std::mem::take(window);
        let record = MetricsRecord {
            epoch,
            batch_index,
            train_loss: (w.batches > 0).then(|| w.loss / w.batches as f64),
            train_acc: (w.samples > 0).then(|| w.correct as f64 / w.samples as f64),
            eval_acc: ev.accuracy,
            mean_si,
            reg_mu_si: (w.mu_batches > 0).then(|| w.mu_si / w.mu_batches as f64),
            top5_class_count: class_balance(&ev.counts, k)?,
            regularizer_active: active,
        };
        if let Some(dir) = self.out_dir {
            let path = dir.join(METRICS_FILE);
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            let line = serde_json::to_string(&record).expect("metrics serialize") + "\n";
            f.write_all(line.as_bytes()).map_err(|e| Error::io(&path, e))?;

            // the untrained network is not checkpointed
            if batch_index > 0 {
                let meta = CheckpointMeta {
                    epoch,
                    batch_index,
                    seed: self.config.run.seed,
                };
                let ck = Checkpoint {
                    spec: spec.clone(),
                    meta,
                    params: self.model.param_tensors().to_vec(),
                    velocity: self.sgd.velocity().to_vec(),
                };
                ck.save(&dir.join(format!("{}.ckpt", meta.id())))?;
                let si_path = dir.join(format!("si_{}.csv", meta.id()));
                fs::write(&si_path, report::si_csv(&[(meta, &si)])).map_err(|e| Error::io(&si_path, e))?;
            }
        }
        self.metrics.records.push(record);
        Ok(())
    }
}
