//! Optimization, schedules, training loops and evaluation statistics.

mod loops;
mod metrics;
mod optim;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataError;
use crate::model::ModelError;
use crate::tensor::TensorError;

pub use loops::{
    ar_eval, evaluate, make_samples, prepare_dataset, train_ar, train_supervised, train_supervised_with,
    ArOutcome, ArTarget, EpochRecord, LabelStats, PreparedData, Sample, TrainOutcome,
};
pub use metrics::{paired_t_test, MetricReport, TTest};
pub use optim::AdamW;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite gradient for {0}")]
    NonFiniteGradient(String),
    #[error("training diverged at epoch {epoch}: {what}")]
    Diverged { epoch: usize, what: String },
    #[error("{0}")]
    Stats(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Step,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Scratch,
    Finetune,
    ArPretrain,
    ArFinetune,
}

impl Strategy {
    pub fn parse(s: &str) -> Option<Strategy> {
        match s {
            "scratch" => Some(Strategy::Scratch),
            "finetune" => Some(Strategy::Finetune),
            "ar_pretrain" => Some(Strategy::ArPretrain),
            "ar_finetune" => Some(Strategy::ArFinetune),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub step_size: Option<usize>,
    pub gamma: Option<f64>,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub seed: u64,
    pub strategy: Strategy,
    pub loss: Loss,
    /// Recompute layer intermediates in the backward pass.
    pub recompute: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::for_strategy(Strategy::Scratch)
    }
}

impl TrainConfig {
    /// Published tiny-size hyperparameters for each strategy.
    pub fn for_strategy(strategy: Strategy) -> TrainConfig {
        let base = TrainConfig {
            epochs: 1000,
            batch_size: 32,
            lr: 5e-5,
            schedule: Schedule::Step,
            step_size: Some(500),
            gamma: Some(0.5),
            warmup_epochs: 0,
            weight_decay: 1e-8,
            betas: (0.9, 0.999),
            eps: 1e-8,
            seed: 0,
            strategy,
            loss: Loss::Mse,
            recompute: false,
        };
        match strategy {
            Strategy::Scratch => base,
            Strategy::Finetune => TrainConfig {
                epochs: 600,
                step_size: Some(200),
                ..base
            },
            Strategy::ArPretrain => TrainConfig {
                epochs: 4000,
                lr: 1.5e-4,
                schedule: Schedule::Cosine,
                step_size: None,
                gamma: None,
                warmup_epochs: 10,
                weight_decay: 0.5,
                ..base
            },
            Strategy::ArFinetune => TrainConfig {
                epochs: 600,
                lr: 1.5e-4,
                schedule: Schedule::Cosine,
                step_size: None,
                gamma: None,
                warmup_epochs: 10,
                weight_decay: 1e-6,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad("lr must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return bad("weight_decay must be >= 0 and eps > 0");
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.schedule == Schedule::Step {
            match (self.step_size, self.gamma) {
                (Some(s), Some(g)) if s > 0 && g > 0.0 => {}
                _ => return bad("step schedule needs step_size > 0 and gamma > 0"),
            }
        }
        Ok(())
    }
}

/// Learning rate for `epoch` (0-based).
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    match cfg.schedule {
        Schedule::Step => {
            let step = cfg.step_size.unwrap_or(usize::MAX).max(1);
            cfg.lr * cfg.gamma.unwrap_or(1.0).powi((epoch / step) as i32)
        }
        Schedule::Cosine => {
            let w = cfg.warmup_epochs;
            if epoch < w {
                return cfg.lr / w as f64 * (epoch + 1) as f64;
            }
            let span = cfg.epochs.saturating_sub(w).max(1) as f64;
            let progress = ((epoch - w) as f64 / span).min(1.0);
            cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_decay_example() {
        let cfg = TrainConfig::for_strategy(Strategy::Scratch);
        assert!((lr_at(600, &cfg) - 2.5e-5).abs() < 1e-20);
        assert_eq!(lr_at(499, &cfg), 5e-5);
        assert!((lr_at(1000, &cfg) - 1.25e-5).abs() < 1e-20);
    }

    #[test]
    fn cosine_endpoints() {
        let cfg = TrainConfig::for_strategy(Strategy::ArPretrain);
        assert_eq!(lr_at(cfg.warmup_epochs - 1, &cfg), cfg.lr);
        assert!((lr_at(0, &cfg) - cfg.lr / 10.0).abs() < 1e-20);
        assert_eq!(lr_at(cfg.warmup_epochs, &cfg), cfg.lr);
        let last = lr_at(cfg.epochs - 1, &cfg);
        assert!(last < 1e-9 * cfg.lr * 1e3, "{last}");
        for e in cfg.warmup_epochs..cfg.epochs - 1 {
            assert!(lr_at(e + 1, &cfg) <= lr_at(e, &cfg));
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut c = TrainConfig::default();
        c.step_size = None;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "schedule": "cosine"}"#).unwrap();
        assert_eq!(c.epochs, 3);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epochz": 3}"#).is_err());
    }
}
