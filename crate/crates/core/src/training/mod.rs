//! Optimization: Adam, gradient clipping, early stopping and grid search.

mod adam;
mod grid;
mod record;
mod run;

use serde::{Deserialize, Serialize};

use crate::distributions::Family;
use crate::error::{Error, Result};

pub use adam::{adam_step, clip_gradients, grad_norm, AdamState};
pub use grid::{grid_search, GridCell, GridResult};
pub use record::{EpochRecord, RunRecord, StopReason};
pub use run::{evaluate_nll, train, TrainData, TrainOutcome};

/// Which steps of a window enter the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossRange {
    /// Forecast steps `[t0, T)` only.
    #[default]
    HorizonOnly,
    FullWindow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Clip threshold. Used when clipping is on; 10 when unset.
    pub grad_clip_norm: Option<f64>,
    /// Force clipping on or off; unset means on for the Gaussian only.
    pub clip_gradients: Option<bool>,
    pub seeds: Vec<u64>,
    pub loss_range: LossRange,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 128,
            max_epochs: 100,
            patience: 5,
            grad_clip_norm: None,
            clip_gradients: None,
            seeds: vec![0, 1, 2, 3, 4],
            loss_range: LossRange::HorizonOnly,
        }
    }
}

impl TrainConfig {
    pub const DEFAULT_CLIP: f64 = 10.0;

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return bad(format!("grad_clip_norm must be positive, got {c}"));
            }
        }
        Ok(())
    }

    /// Clip threshold in effect for `family`, if any.
    pub fn effective_clip(&self, family: Family) -> Option<f64> {
        let norm = self.grad_clip_norm.unwrap_or(Self::DEFAULT_CLIP);
        match self.clip_gradients {
            Some(false) => None,
            Some(true) => Some(norm),
            None if family == Family::Gaussian => Some(norm),
            None => self.grad_clip_norm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    Improved,
    Waiting,
    Stop,
}

/// Patience counter over validation losses; improvement is strict.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    waiting: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience: patience.max(1),
            best: f64::INFINITY,
            best_epoch: 0,
            waiting: 0,
        }
    }

    /// Records the loss of `epoch`; non-finite losses never improve.
    pub fn update(&mut self, epoch: usize, loss: f64) -> Progress {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.waiting = 0;
            Progress::Improved
        } else {
            self.waiting += 1;
            if self.waiting >= self.patience {
                Progress::Stop
            } else {
                Progress::Waiting
            }
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}
