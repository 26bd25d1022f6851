use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::error::{PdseError, Result};
use crate::eval::PostprocessConfig;
use crate::network::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    /// Applied to weight tensors only (not biases or normalization scales).
    pub weight_decay: f64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Linear ramp from 0 over this many steps.
    pub warmup_steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: Some(10.0),
            warmup_steps: 100,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Epochs (1-based) after which the rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            decay_epochs: vec![],
            decay_factor: 0.1,
        }
    }
}

impl ScheduleConfig {
    /// Multiplier in effect during `epoch` (0-based).
    pub fn factor(&self, epoch: usize) -> f64 {
        let n = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.decay_factor.powi(n as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Square network input side; images are resampled to it.
    pub input_size: usize,
    /// Use the five-area crops during training.
    pub augment: bool,
    /// Probability of training on a crop instead of the full image.
    pub crop_prob: f64,
    pub augmentation: AugmentConfig,
    /// Split scored after every `eval_every` epochs (falls back to train when empty).
    pub val_split: String,
    pub test_split: String,
    pub eval_every: usize,
    pub eval_iou: f64,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub postprocess: PostprocessConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data/phantoms"),
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
            epochs: 24,
            batch_size: 4,
            input_size: 128,
            augment: true,
            crop_prob: 0.5,
            augmentation: AugmentConfig::default(),
            val_split: "val".into(),
            test_split: "test".into(),
            eval_every: 1,
            eval_iou: 0.5,
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig {
                decay_epochs: vec![16, 22],
                decay_factor: 0.1,
            },
            postprocess: PostprocessConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| PdseError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Reads a TOML config; relative paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut c = Self::from_toml(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if c.dataset.is_relative() {
            c.dataset = base.join(&c.dataset);
        }
        if c.output_dir.is_relative() {
            c.output_dir = base.join(&c.output_dir);
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(PdseError::Config(m.to_string()));
        if self.epochs == 0 {
            return err("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1");
        }
        if self.input_size == 0 || self.input_size % 128 != 0 {
            return err("input_size must be a positive multiple of 128");
        }
        if self.eval_every == 0 {
            return err("eval_every must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.crop_prob) || !(self.eval_iou > 0.0 && self.eval_iou <= 1.0) {
            return err("crop_prob and eval_iou must lie in [0, 1]");
        }
        let a = &self.augmentation;
        if !(a.crop_frac > 0.0 && a.crop_frac <= 1.0) || !(0.0..=1.0).contains(&a.min_visible) || a.jitter < 0.0 {
            return err("augmentation needs 0 < crop_frac ≤ 1, 0 ≤ min_visible ≤ 1, jitter ≥ 0");
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.lr.is_finite()) || !(0.0..1.0).contains(&o.momentum) || o.weight_decay < 0.0 {
            return err("optimizer needs lr ≥ 0, 0 ≤ momentum < 1, weight_decay ≥ 0");
        }
        if o.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return err("grad_clip must be positive");
        }
        if !(self.schedule.decay_factor > 0.0) {
            return err("decay_factor must be positive");
        }
        self.model.validate()
    }
}
