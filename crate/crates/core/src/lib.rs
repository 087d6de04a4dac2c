pub mod ablation;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod cka;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod model;
pub mod report;
pub mod selectivity;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Graph, Var};
pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use error::{Error, Result};
pub use gradcheck::{grad_check, grad_check_many};
pub use model::{AblationMask, ArchitectureSpec, Model, Site, TapCapture, TapId};
pub use selectivity::{ClassMeanAccumulator, SelectivityRecord, SelectivityReport};
pub use tensor::Tensor;
