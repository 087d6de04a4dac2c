//! Experiment configuration, read from a TOML file with one section per
//! concern:
//!
//! ```toml
//! [architecture]
//! blocks_per_module = [2, 2, 2, 2]
//! channels_per_module = [8, 16, 32, 64]
//! strides = [1, 2, 2, 2]
//! input_shape = [1, 16, 16]
//! num_classes = 10
//!
//! [data]
//! kind = "synthetic"
//! noise_sigma = 0.25
//!
//! [optimizer]
//! learning_rate = 0.05
//! momentum = 0.9
//! weight_decay = 1e-4
//!
//! [schedule]            # optional; omit for plain cross-entropy
//! alpha = -20.0
//! start_epoch = 0
//! targeted_modules = [0, 1, 2]
//!
//! [run]
//! epochs = 20
//! batch_size = 64
//! seed = 0
//! sub_epoch_every = 50
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::ArchitectureSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// When and how strongly the selectivity term is added to the loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerSchedule {
    pub alpha: f64,
    #[serde(default)]
    pub start_epoch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_epoch: Option<usize>,
    /// Defaults to every module except the last.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targeted_modules: Option<BTreeSet<usize>>,
}

impl RegularizerSchedule {
    pub fn is_active(&self, epoch: usize) -> bool {
        self.alpha != 0.0 && self.start_epoch <= epoch && self.stop_epoch.is_none_or(|stop| epoch < stop)
    }

    pub fn modules(&self, spec: &ArchitectureSpec) -> BTreeSet<usize> {
        self.targeted_modules
            .clone()
            .unwrap_or_else(|| (0..spec.num_modules().saturating_sub(1).max(1)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Extra checkpoint every this many batches within an epoch; 0 disables.
    pub sub_epoch_every: usize,
    pub eval_batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            epochs: 20,
            batch_size: 64,
            seed: 0,
            sub_epoch_every: 50,
            eval_batch_size: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataConfig {
    Synthetic(SyntheticSpec),
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        eval_images: PathBuf,
        eval_labels: PathBuf,
        #[serde(default)]
        num_classes: Option<usize>,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic(SyntheticSpec::default())
    }
}

impl DataConfig {
    /// Materializes `(train, eval)`; relative IDX paths resolve against `base`.
    pub fn load(&self, base: Option<&Path>) -> Result<(Dataset, Dataset)> {
        match self {
            DataConfig::Synthetic(spec) => data::generate(spec),
            DataConfig::Idx {
                train_images,
                train_labels,
                eval_images,
                eval_labels,
                num_classes,
            } => {
                let resolve = |p: &Path| match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p.to_path_buf(),
                };
                let train = data::load_idx(&resolve(train_images), &resolve(train_labels), *num_classes, Split::Train)?;
                let eval = data::load_idx(
                    &resolve(eval_images),
                    &resolve(eval_labels),
                    Some(num_classes.unwrap_or(train.num_classes())),
                    Split::Eval,
                )?;
                Ok((train, eval))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub architecture: ArchitectureSpec,
    pub data: DataConfig,
    pub optimizer: OptimizerConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<RegularizerSchedule>,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        ExperimentConfig::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        if let DataConfig::Synthetic(s) = &self.data {
            s.validate()?;
            if s.image_shape != self.architecture.input_shape {
                return Err(Error::Config(format!(
                    "data.image_shape {:?} differs from architecture.input_shape {:?}",
                    s.image_shape, self.architecture.input_shape
                )));
            }
            if s.num_classes != self.architecture.num_classes {
                return Err(Error::Config(format!(
                    "data.num_classes {} differs from architecture.num_classes {}",
                    s.num_classes, self.architecture.num_classes
                )));
            }
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return Err(Error::Config("optimizer.learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return Err(Error::Config("optimizer.momentum must lie in [0, 1)".into()));
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return Err(Error::Config("optimizer.weight_decay must be ≥ 0".into()));
        }
        if self.run.epochs == 0 || self.run.batch_size == 0 || self.run.eval_batch_size == 0 {
            return Err(Error::Config("run.epochs, run.batch_size and run.eval_batch_size must be positive".into()));
        }
        if let Some(s) = &self.schedule {
            if !s.alpha.is_finite() {
                return Err(Error::Config("schedule.alpha must be finite".into()));
            }
            if let Some(stop) = s.stop_epoch {
                if stop <= s.start_epoch {
                    return Err(Error::Config("schedule.stop_epoch must exceed start_epoch".into()));
                }
            }
            let modules = s.modules(&self.architecture);
            if modules.is_empty() {
                return Err(Error::Config("schedule.targeted_modules is empty".into()));
            }
            if let Some(&m) = modules.iter().find(|&&m| m >= self.architecture.num_modules()) {
                return Err(Error::Config(format!("schedule targets unknown module {m}")));
            }
        }
        Ok(())
    }
}
