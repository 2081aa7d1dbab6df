//! Optimization: learning-rate schedule, Adam with decoupled weight decay,
//! the epoch loop, best-epoch selection and checkpoints.

mod checkpoint;
mod optim;
mod schedule;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::error::{Error, Result};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, ArrayEntry, Checkpoint};
pub use optim::{Adam, OptimizerState};
pub use schedule::lr_at;
pub use trainer::{evaluate, select_best, train, EpochRecord, TrainOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub final_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Per-class share of the labelled data used for training; the rest
    /// is validation.
    pub train_ratio: f64,
    /// Measure eval-mode accuracy on the training split after each epoch.
    pub eval_train: bool,
    pub augmentation: AugmentConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            warmup_epochs: 5,
            base_lr: 5e-5,
            final_lr: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-2,
            batch_size: 8,
            seed: 0,
            train_ratio: 0.8,
            eval_train: true,
            augmentation: AugmentConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::config(format!(
                "warmup_epochs ({}) must be smaller than epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(self.final_lr >= 0.0 && self.final_lr <= self.base_lr) {
            return Err(Error::config(format!("final_lr must lie in [0, base_lr], got {}", self.final_lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("eps must be positive and weight_decay non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(Error::config(format!("train_ratio must lie in (0, 1), got {}", self.train_ratio)));
        }
        self.augmentation.validate()
    }

    pub fn adam(&self) -> Adam {
        Adam { beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }
}
