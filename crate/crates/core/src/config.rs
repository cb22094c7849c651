//! Experiment configuration: one JSON document describing the model, data,
//! objectives, optimizer and schedule. Its hash is embedded in every output
//! artifact so runs are traceable.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, InferenceWindowing};
use crate::feedback::FeedbackConfig;
use crate::matching::LossWeights;
use crate::model::ModelConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Deep supervision: apply the detection loss to every decoder layer.
    pub aux_loss: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { weights: LossWeights::default(), aux_loss: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub decay_factor: f64,
    /// Epochs at which the learning rate decays; when absent the schedule
    /// steps at 2/3 and 5/6 of the total epochs.
    pub decay_epochs: Option<Vec<usize>>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { lr: 2e-4, decay_factor: 0.1, decay_epochs: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DataConfig {
    pub synth: SynthConfig,
    /// Inference-time window slicing for sequences longer than the window.
    pub windowing: InferenceWindowing,
    /// Resize all features to this length before use.
    pub resize_to: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            synth: SynthConfig::default(),
            windowing: InferenceWindowing::default(),
            resize_to: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub feedback: FeedbackConfig,
    pub data: DataConfig,
    pub optimizer: OptimizerConfig,
    pub eval: EvalConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seed for parameter init, shuffling and dropout. The dataset has its
    /// own seed under `data.synth`.
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0 = only the final one).
    pub checkpoint_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            feedback: FeedbackConfig::default(),
            data: DataConfig::default(),
            optimizer: OptimizerConfig::default(),
            eval: EvalConfig::default(),
            epochs: 60,
            batch_size: 16,
            seed: 1,
            checkpoint_every: 20,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.synth.validate()?;
        if self.model.feature_dim != self.data.synth.feature_dim {
            return Err(Error::Config(format!(
                "model feature_dim {} differs from data feature_dim {}",
                self.model.feature_dim, self.data.synth.feature_dim
            )));
        }
        if self.model.num_classes != self.data.synth.num_classes {
            return Err(Error::Config(format!(
                "model num_classes {} differs from data num_classes {}",
                self.model.num_classes, self.data.synth.num_classes
            )));
        }
        if self.model.num_queries < self.data.synth.max_instances {
            return Err(Error::Config(format!(
                "{} queries cannot cover up to {} instances",
                self.model.num_queries, self.data.synth.max_instances
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.eval.thresholds.is_empty() {
            return Err(Error::Config("at least one evaluation threshold is required".into()));
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.optimizer.lr)));
        }
        Ok(())
    }

    /// Stable hash of the serialized config; identical configurations get
    /// identical hashes.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Learning rate at a given epoch under the step schedule.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decay_epochs = self
            .optimizer
            .decay_epochs
            .clone()
            .unwrap_or_else(|| vec![self.epochs * 2 / 3, self.epochs * 5 / 6]);
        let steps = decay_epochs.iter().filter(|&&e| e <= epoch && e > 0).count();
        self.optimizer.lr * self.optimizer.decay_factor.powi(steps as i32)
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("config file: {e}")))?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_hash_is_stable() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 16);

        let mut other = ExperimentConfig::default();
        other.seed = 2;
        assert_ne!(cfg.hash(), other.hash());
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = ExperimentConfig::default();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn lr_schedule_steps_at_two_thirds_and_five_sixths() {
        let cfg = ExperimentConfig { epochs: 60, ..Default::default() };
        assert_eq!(cfg.lr_at(0), 2e-4);
        assert_eq!(cfg.lr_at(39), 2e-4);
        assert!((cfg.lr_at(40) - 2e-5).abs() < 1e-18);
        assert!((cfg.lr_at(50) - 2e-6).abs() < 1e-19);
    }

    #[test]
    fn mismatched_dims_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.model.feature_dim = 48;
        assert!(cfg.validate().is_err());
    }
}
