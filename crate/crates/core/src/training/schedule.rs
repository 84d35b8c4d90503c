use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Linear ramp length in optimizer steps; used only by attention-fusion models.
    pub warmup_steps: usize,
    /// Epochs without a new best validation loss before the rate halves.
    pub plateau_patience: usize,
    /// Epochs without a new best validation loss before training stops.
    pub early_stop: usize,
    /// Samples per optimizer step.
    pub effective_batch: usize,
    /// Samples per forward pass.
    pub physical_batch: usize,
    /// Clips are cut to this many seconds.
    pub max_clip_secs: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Forces single-stream data loading.
    #[serde(default)]
    pub deterministic: bool,
    pub max_epochs: usize,
    /// Stop after this many optimizer steps, if set.
    #[serde(default)]
    pub max_steps: Option<usize>,
    /// Random training crop length in seconds; a multiple of 0.2. Whole clips if unset.
    #[serde(default)]
    pub crop_secs: Option<f64>,
    /// Validation runs on at most this many leading seconds of each clip.
    #[serde(default)]
    pub val_secs: Option<f64>,
    #[serde(default)]
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            warmup_steps: 15_000,
            plateau_patience: 6,
            early_stop: 10,
            effective_batch: 64,
            physical_batch: 4,
            max_clip_secs: 10.0,
            weight_decay: 1e-2,
            grad_clip: 5.0,
            seed: 0,
            deterministic: false,
            max_epochs: 200,
            max_steps: None,
            crop_secs: Some(4.0),
            val_secs: None,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Schedule scaled to the synthetic desk corpus.
    pub fn desk() -> Self {
        Self { warmup_steps: 500, crop_secs: Some(1.0), val_secs: Some(2.0), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.plateau_patience >= self.early_stop {
            return Err(Error::Config(format!(
                "plateau_patience {} must be below early_stop {}",
                self.plateau_patience, self.early_stop
            )));
        }
        if self.physical_batch == 0 || self.effective_batch == 0 || !self.effective_batch.is_multiple_of(self.physical_batch) {
            return Err(Error::Config(format!(
                "effective_batch {} must be a positive multiple of physical_batch {}",
                self.effective_batch, self.physical_batch
            )));
        }
        if self.physical_batch > 1 && self.crop_secs.is_none() {
            return Err(Error::Config("physical batches above 1 need crop_secs".into()));
        }
        if let Some(c) = self.crop_secs {
            let frames = c * 5.0;
            if !(c > 0.0) || (frames - frames.round()).abs() > 1e-9 {
                return Err(Error::Config(format!("crop_secs {c} must be a positive multiple of 0.2")));
            }
        }
        if !(self.max_clip_secs > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return Err(Error::Config("max_clip_secs must be positive, weight_decay and grad_clip >= 0".into()));
        }
        self.loss.validate()
    }

    /// Forward passes per optimizer step.
    pub fn accumulation_steps(&self) -> usize {
        self.effective_batch / self.physical_batch
    }
}

/// Learning rate: linear warmup, then halving whenever the best validation loss has
/// not improved for `patience` epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    base: f64,
    warmup_steps: usize,
    patience: usize,
    early_stop: usize,
    halvings: u32,
    best: Option<f64>,
    epochs_since_best: usize,
}

impl LrSchedule {
    pub fn new(cfg: &TrainConfig, warmup: bool) -> Self {
        Self {
            base: cfg.lr,
            warmup_steps: if warmup { cfg.warmup_steps } else { 0 },
            patience: cfg.plateau_patience,
            early_stop: cfg.early_stop,
            halvings: 0,
            best: None,
            epochs_since_best: 0,
        }
    }

    /// Rate for optimizer step `step`, counted from 1.
    pub fn lr(&self, step: usize) -> f64 {
        let scale = 0.5f64.powi(self.halvings as i32);
        let ramp = if self.warmup_steps > 0 && step < self.warmup_steps {
            step as f64 / self.warmup_steps as f64
        } else {
            1.0
        };
        self.base * scale * ramp
    }

    /// Records an epoch's validation loss. Returns true when it is a new best.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        if self.best.is_none_or(|b| val_loss < b) {
            self.best = Some(val_loss);
            self.epochs_since_best = 0;
            return true;
        }
        self.epochs_since_best += 1;
        if self.epochs_since_best.is_multiple_of(self.patience) {
            self.halvings += 1;
        }
        false
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn halvings(&self) -> u32 {
        self.halvings
    }

    pub fn should_stop(&self) -> bool {
        self.epochs_since_best >= self.early_stop
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_midpoint() {
        let cfg = TrainConfig::default();
        let s = LrSchedule::new(&cfg, true);
        assert!((s.lr(7500) - 2.5e-4).abs() < 1e-15);
        assert_eq!(s.lr(15_000), 5e-4);
        let flat = LrSchedule::new(&cfg, false);
        assert_eq!(flat.lr(1), 5e-4);
    }

    #[test]
    fn plateau_halves_then_stops() {
        let cfg = TrainConfig::default();
        let mut s = LrSchedule::new(&cfg, false);
        assert!(s.observe(1.0));
        for epoch in 1..=10 {
            assert!(!s.observe(2.0));
            let expected = if epoch >= 6 { 2.5e-4 } else { 5e-4 };
            assert_eq!(s.lr(1), expected, "epoch {epoch}");
            assert_eq!(s.should_stop(), epoch >= 10);
        }
        assert_eq!(s.halvings(), 1);
    }

    #[test]
    fn accumulation_arithmetic() {
        let cfg = TrainConfig { physical_batch: 4, ..TrainConfig::default() };
        assert_eq!(cfg.accumulation_steps(), 16);
        let bad = TrainConfig { physical_batch: 5, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { plateau_patience: 10, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
    }
}
