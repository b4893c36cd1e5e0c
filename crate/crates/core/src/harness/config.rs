use serde::{Deserialize, Serialize};

use crate::data::DatasetKind;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub dataset: DatasetKind,
    pub epochs_normal: usize,
    pub epochs_hard: usize,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub seed: u64,
    /// Single worker thread, and wall-clock columns zeroed in `metrics.csv`.
    pub deterministic: bool,
    /// Restart the learning-rate schedule when the hard phase begins.
    pub reset_lr_on_hard: bool,
    /// Batch size used for test-set evaluation.
    pub eval_batch_size: usize,
}

impl TrainConfig {
    pub fn new(model: ModelConfig, dataset: DatasetKind) -> Self {
        Self {
            model,
            dataset,
            epochs_normal: 100,
            epochs_hard: 100,
            adam: AdamConfig::default(),
            batch_size: 128,
            seed: 0,
            deterministic: false,
            reset_lr_on_hard: false,
            eval_batch_size: 256,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_normal + self.epochs_hard
    }

    pub fn validate(&self) -> Result<()> {
        if self.adam.lr <= 0.0 {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.adam.lr)));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        self.model.validate()
    }
}
