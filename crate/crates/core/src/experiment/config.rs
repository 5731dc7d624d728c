use std::path::PathBuf;

use crate::backbone::ModelSpec;
use crate::controller::{StrategyKind, DEFAULT_R_MIN};
use crate::error::{Error, Result};

/// Everything needed to reproduce one training run.
///
/// Defaults are the full-scale settings: WRN-28-4, 500 epochs, batch 128,
/// SGD at 0.1 with Nesterov momentum 0.9 and no weight decay, seed 3407.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub strategy: StrategyKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub model: ModelSpec,
    pub data_dir: PathBuf,
    pub metrics_path: PathBuf,
    pub checkpoint_path: Option<PathBuf>,
    /// Train on the first `n` training images only.
    pub subset: Option<usize>,
    /// Evaluate on the first `n` test images only.
    pub test_subset: Option<usize>,
    /// Also report test accuracy with every site dense (`r = 1`).
    pub eval_dense: bool,
    pub r_min: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            strategy: StrategyKind::Dense,
            epochs: 500,
            batch_size: 128,
            eval_batch_size: 128,
            base_lr: 0.1,
            momentum: 0.9,
            seed: 3407,
            model: ModelSpec::wrn(28, 4),
            data_dir: PathBuf::from("data/cifar-10-batches-bin"),
            metrics_path: PathBuf::from("metrics.csv"),
            checkpoint_path: None,
            subset: None,
            test_subset: None,
            eval_dense: false,
            r_min: DEFAULT_R_MIN,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if matches!(self.subset, Some(0)) || matches!(self.test_subset, Some(0)) {
            return Err(Error::Config("subset sizes must be positive".into()));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {}", self.base_lr)));
        }
        if !(self.r_min > 0.0 && self.r_min <= 1.0) {
            return Err(Error::Config(format!("r_min must lie in (0, 1], got {}", self.r_min)));
        }
        Ok(())
    }
}
