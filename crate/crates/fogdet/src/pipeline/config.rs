//! Training configuration: every knob of the two-phase loop, loadable from
//! a TOML file that mirrors the struct field-for-field.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::AdaptConfig;
use crate::detector::{ArchConfig, DetectConfig};
use crate::error::{Error, Result};
use crate::losses::{LossWeights, RPN_BATCH_SIZE};
use crate::pseudo::PseudoLabelConfig;

/// Everything the training loop needs. Defaults follow the declared
/// experiment parameters: 10 epochs, batch size 10, 6 classes, 80/10/10
/// split. ("Epochs 10%" in the source table is treated as a typo for 10.)
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub num_classes: usize,
    /// Train/valid/test fractions, summing to 1.
    pub split: [f64; 3],
    pub seed: u64,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global gradient-norm clip over all trainable parameters.
    pub grad_clip: f64,
    pub weights: LossWeights,
    pub pseudo: PseudoLabelConfig,
    /// Peak gradient-reversal coefficient after warm-up.
    pub grl_max_lambda: f64,
    /// Fraction of epochs spent in the supervised burn-in phase.
    pub burn_in_fraction: f64,
    /// Master switch for the adaptation machinery (phase 2).
    pub adaptation_enabled: bool,
    /// Anchors sampled per image for the RPN loss.
    pub rpn_batch: usize,
    /// ROIs sampled per image for the second-stage loss.
    pub roi_batch: usize,
    /// Target fraction of foreground ROIs in a sampled batch.
    pub roi_fg_fraction: f64,
    /// Score floor for the student's foggy-view detections entering the
    /// consistency term.
    pub consistency_student_threshold: f64,
    pub arch: ArchConfig,
    pub adapt: AdaptConfig,
    /// Detection-time selection knobs used by evaluation.
    pub detect: DetectConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 10,
            num_classes: 6,
            split: [0.8, 0.1, 0.1],
            seed: 0,
            learning_rate: 1e-3,
            momentum: 0.9,
            grad_clip: 10.0,
            weights: LossWeights::default(),
            pseudo: PseudoLabelConfig::default(),
            grl_max_lambda: 1.0,
            burn_in_fraction: 0.4,
            adaptation_enabled: true,
            rpn_batch: RPN_BATCH_SIZE,
            roi_batch: 64,
            roi_fg_fraction: 0.25,
            consistency_student_threshold: 0.05,
            arch: ArchConfig::default(),
            adapt: AdaptConfig::default(),
            detect: DetectConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale configuration for tests and examples: tiny model, few
    /// epochs.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            arch: ArchConfig::desk(),
            adapt: AdaptConfig::desk(),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if self.num_classes < 1 {
            return Err(Error::invalid("num_classes must be >= 1"));
        }
        let sum: f64 = self.split.iter().sum();
        if self.split.iter().any(|f| !f.is_finite() || *f < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "split fractions must be >= 0 and sum to 1, got {:?}",
                self.split
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip > 0.0) {
            return Err(Error::invalid("grad_clip must be positive"));
        }
        if !(self.grl_max_lambda.is_finite() && self.grl_max_lambda >= 0.0) {
            return Err(Error::invalid("grl_max_lambda must be >= 0"));
        }
        if !(self.burn_in_fraction.is_finite() && (0.0..=1.0).contains(&self.burn_in_fraction)) {
            return Err(Error::invalid("burn_in_fraction must lie in [0, 1]"));
        }
        if self.rpn_batch < 1 || self.roi_batch < 1 {
            return Err(Error::invalid("rpn_batch and roi_batch must be >= 1"));
        }
        if !(self.roi_fg_fraction.is_finite() && self.roi_fg_fraction > 0.0 && self.roi_fg_fraction <= 1.0)
        {
            return Err(Error::invalid("roi_fg_fraction must lie in (0, 1]"));
        }
        if !(self.consistency_student_threshold.is_finite()
            && (0.0..=1.0).contains(&self.consistency_student_threshold))
        {
            return Err(Error::invalid(
                "consistency_student_threshold must lie in [0, 1]",
            ));
        }
        self.weights.validate()?;
        self.pseudo.validate()?;
        self.arch.validate()?;
        self.adapt.validate()?;
        Ok(())
    }

    /// The architecture actually instantiated: `num_classes` is
    /// authoritative at the top level and overrides the nested copy.
    pub fn effective_arch(&self) -> ArchConfig {
        ArchConfig {
            num_classes: self.num_classes,
            ..self.arch.clone()
        }
    }

    /// Number of burn-in (phase 1) epochs: the configured fraction of all
    /// epochs, rounded half-up, never exceeding the epoch count.
    pub fn burn_in_epochs(&self) -> usize {
        ((self.burn_in_fraction * self.epochs as f64).round() as usize).min(self.epochs)
    }

    /// SHA-256 of the canonical JSON form, used for checkpoint
    /// compatibility checks.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parse a TOML config file into a [`TrainConfig`] and validate it.
pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: TrainConfig = toml::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}
