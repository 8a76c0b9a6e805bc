//! Two-stage training: extractor pretraining on single-tab traces, then the
//! scale encoder and heads on multi-tab traces with the extractor frozen.

mod fit;
mod loss;
mod matching;
mod pretrain;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::scalar::Scalar;

pub use fit::{
    head_batch_loss, total_loss, trace_loss, train_detector, write_loss_csv, BatchLoss, FeatureSample, LossRecord,
    TraceLoss,
};
pub use loss::{focal_loss, focal_loss_logit, reg_loss, reg_loss_grad, PROB_EPS};
pub use matching::{match_proposals, Assignment, MatchResult};
pub use pretrain::{pretrain_extractor, PretrainConfig, PretrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    /// Nearest proposals considered per ground truth.
    pub k: usize,
    pub tau_pos: f64,
    pub tau_neg: f64,
    /// Ignore a proposal only for the classes of the ground truths it overlaps
    /// above `tau_neg`; its other class scores are trained as negatives.
    pub class_ignore: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
            k: 9,
            tau_pos: 0.3,
            tau_neg: 0.1,
            class_ignore: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.tau_neg && self.tau_neg <= self.tau_pos && self.tau_pos < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < tau_neg <= tau_pos < 1, got {} and {}",
                self.tau_neg, self.tau_pos
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) || self.gamma < 0.0 || self.k == 0 {
            return Err(Error::Config(
                "focal alpha in [0, 1], gamma >= 0 and k >= 1 required".into(),
            ));
        }
        Ok(())
    }
}

/// Stage-two settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Number of anchor lengths clustered from the training ground truths.
    pub anchors: usize,
    /// Monitored class count; inferred from the largest label when absent.
    pub classes: Option<usize>,
    pub head_channels: Option<usize>,
    pub center_scale: f64,
    /// Rescale each step's gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
    /// Heavy-ball momentum; zero gives the plain update.
    pub momentum: f64,
    /// Fraction of the run after which the learning rate drops tenfold.
    pub decay_at: Option<f64>,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.12,
            batch: 8,
            iterations: 2000,
            seed: 0,
            anchors: 8,
            classes: None,
            head_channels: None,
            center_scale: 1.0,
            clip_norm: Some(1.0),
            momentum: 0.0,
            decay_at: None,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch == 0 || self.anchors == 0 {
            return Err(Error::Config("batch size and anchor count must be positive".into()));
        }
        if !(self.center_scale > 0.0) {
            return Err(Error::Config("center scale must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if let Some(f) = self.decay_at {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("decay point must lie in [0, 1], got {f}")));
            }
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("clip norm must be positive, got {c}")));
            }
        }
        self.loss.validate()
    }
}

/// Multiply every parameter of `m` by `k`.
pub(crate) fn scale_params<T: Scalar, M: Module<T>>(m: &mut M, k: T) {
    for (_, t) in m.params_mut() {
        for v in t.data_mut() {
            *v *= k;
        }
    }
}

/// Global L2 norm of every parameter of `m`.
pub(crate) fn global_norm<T: Scalar, M: Module<T>>(m: &M) -> f64 {
    m.params()
        .iter()
        .flat_map(|(_, t)| t.data())
        .map(|v| v.to_f64().unwrap_or(f64::NAN).powi(2))
        .sum::<f64>()
        .sqrt()
}
