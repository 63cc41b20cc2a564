use serde::{Deserialize, Serialize};

use crate::accountant::PrivacyBudget;
use crate::data::{DatasetMode, DatasetSpec};
use crate::dp::{NoiseConfig, DEFAULT_FLOOR};
use crate::error::{DpwError, Result};
use crate::federated::FedConfig;
use crate::nn::{Activation, ModelSpec};

/// Batch size at which `base_lr` applies; linear scaling is relative to it.
pub const LR_REFERENCE_BATCH: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Calibrate,
    NoiseCurve,
    SanityNoise,
    SanityPattern,
    Train,
    TrainFederated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipMode {
    Fixed,
    Adaptive,
}

/// Flat experiment description. Every key has a default, so `{}` is a
/// valid config; `dpw --print-config` shows the resolved values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub seed: u64,

    pub hidden_widths: Vec<usize>,
    pub activation: Activation,

    pub dataset_mode: DatasetMode,
    pub n_examples: usize,
    pub test_examples: usize,
    pub users: usize,
    pub records_per_user: usize,
    pub input_rows: usize,
    pub input_cols: usize,
    pub classes: usize,
    pub pattern_count: usize,
    pub pattern_rows: usize,
    pub pattern_cols: usize,
    pub pattern_value: f64,
    pub pattern_label: usize,
    pub blob_spread: f64,
    pub probe_size: usize,

    pub epsilon: f64,
    /// `None` means `N^-1.1` for the training set size `N`.
    pub delta: Option<f64>,
    /// `None` means calibrate to the budget.
    pub sigma: Option<f64>,
    pub sigma_l2: f64,
    pub strict_accounting: bool,

    pub clip_mode: ClipMode,
    pub clip_bound: f64,
    pub alpha: f64,
    pub beta: f64,
    pub clip_floor: f64,

    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_scaling: bool,
    pub momentum: f64,
    pub epochs: u64,

    pub user_fraction: f64,
    pub local_steps: usize,
    pub local_lr: f64,
    pub update_clip: f64,
    pub rounds: usize,

    pub batch_sizes: Vec<usize>,

    pub memorization_threshold: f64,
    pub chance_margin: f64,
    pub recall_high: f64,
    pub recall_low: f64,

    /// Fill the `wall_ms` metrics column. Off by default so outputs are
    /// byte-reproducible.
    pub record_timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let d = DatasetSpec::default();
        Self {
            task: Task::Train,
            seed: 0,
            hidden_widths: vec![256],
            activation: Activation::Relu,
            dataset_mode: DatasetMode::Noise,
            n_examples: d.n_examples,
            test_examples: 1000,
            users: d.users,
            records_per_user: d.records_per_user,
            input_rows: d.input_rows,
            input_cols: d.input_cols,
            classes: d.classes,
            pattern_count: d.pattern_count,
            pattern_rows: d.pattern_rows,
            pattern_cols: d.pattern_cols,
            pattern_value: d.pattern_value,
            pattern_label: d.pattern_label,
            blob_spread: d.blob_spread,
            probe_size: 500,
            epsilon: 20.0,
            delta: None,
            sigma: None,
            sigma_l2: 2.5,
            strict_accounting: false,
            clip_mode: ClipMode::Fixed,
            clip_bound: 2.0,
            alpha: 1.0,
            beta: 2.0,
            clip_floor: DEFAULT_FLOOR,
            batch_size: 128,
            base_lr: 0.01,
            lr_scaling: false,
            momentum: 0.0,
            epochs: 60,
            user_fraction: 0.5,
            local_steps: 5,
            local_lr: 0.05,
            update_clip: 1.0,
            rounds: 50,
            batch_sizes: vec![16, 32, 64, 128, 256, 512],
            memorization_threshold: 0.8,
            chance_margin: 0.10,
            recall_high: 0.8,
            recall_low: 0.3,
            record_timing: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| DpwError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            mode: self.dataset_mode,
            n_examples: self.n_examples,
            users: self.users,
            records_per_user: self.records_per_user,
            input_rows: self.input_rows,
            input_cols: self.input_cols,
            classes: self.classes,
            pattern_count: self.pattern_count,
            pattern_rows: self.pattern_rows,
            pattern_cols: self.pattern_cols,
            pattern_value: self.pattern_value,
            pattern_label: self.pattern_label,
            blob_spread: self.blob_spread,
            seed: self.seed,
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        let mut widths = vec![self.input_rows * self.input_cols];
        widths.extend(&self.hidden_widths);
        widths.push(self.classes);
        ModelSpec {
            layer_widths: widths,
            activation: self.activation,
            seed: self.seed,
        }
    }

    /// Training-set size `N`.
    pub fn dataset_size(&self) -> usize {
        self.dataset_spec().total_records()
    }

    pub fn budget(&self) -> Result<PrivacyBudget> {
        let delta = self
            .delta
            .unwrap_or_else(|| PrivacyBudget::delta_for_dataset(self.dataset_size()));
        PrivacyBudget::new(self.epsilon, delta)
    }

    /// User-level runs protect users, so their default δ is `U^-1.1`.
    pub fn user_budget(&self) -> Result<PrivacyBudget> {
        let delta = self
            .delta
            .unwrap_or_else(|| PrivacyBudget::delta_for_dataset(self.users));
        PrivacyBudget::new(self.epsilon, delta)
    }

    /// `base_lr · B/128` with scaling on, `base_lr` otherwise.
    pub fn effective_lr(&self) -> f64 {
        if self.lr_scaling {
            self.base_lr * self.batch_size as f64 / LR_REFERENCE_BATCH as f64
        } else {
            self.base_lr
        }
    }

    pub fn sampling_rate(&self) -> f64 {
        self.batch_size as f64 / self.dataset_size() as f64
    }

    pub fn steps_per_epoch(&self) -> u64 {
        (self.dataset_size() / self.batch_size.max(1)) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.epochs
    }

    pub fn noise(&self, sigma: f64) -> NoiseConfig {
        NoiseConfig {
            sigma,
            sigma_l2: self.sigma_l2,
            seed: self.seed,
        }
    }

    pub fn fed_config(&self, sigma: f64) -> FedConfig {
        FedConfig {
            user_fraction: self.user_fraction,
            local_steps: self.local_steps,
            local_lr: self.local_lr,
            update_clip: self.update_clip,
            sigma,
            rounds: self.rounds,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DpwError::Config(m.to_string()));
        self.model_spec()
            .validate()
            .map_err(|e| DpwError::Config(e.to_string()))?;
        self.dataset_spec()
            .validate()
            .map_err(|e| DpwError::Config(e.to_string()))?;
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        let federated = matches!(self.task, Task::SanityPattern | Task::TrainFederated);
        if !federated && !matches!(self.task, Task::NoiseCurve) && self.batch_size > self.dataset_size() {
            return bad("batch_size exceeds the dataset size (q = B/N must be <= 1)");
        }
        if matches!(self.task, Task::TrainFederated) && !self.dataset_spec().is_pattern() {
            return bad("train-federated needs a pattern dataset mode");
        }
        if matches!(self.task, Task::SanityPattern) {
            // both pattern modes are generated regardless of dataset_mode
            DatasetSpec {
                mode: DatasetMode::PatternDistributed,
                ..self.dataset_spec()
            }
            .validate()
            .map_err(|e| DpwError::Config(e.to_string()))?;
        }
        if matches!(self.task, Task::SanityNoise) && self.dataset_mode != DatasetMode::Noise {
            return bad("sanity-noise needs dataset_mode = noise");
        }
        if !(self.base_lr > 0.0) {
            return bad("base_lr must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.epochs == 0 && !federated {
            return bad("epochs must be >= 1");
        }
        if !(self.clip_bound > 0.0 && self.alpha > 0.0 && self.beta > 0.0 && self.clip_floor > 0.0) {
            return bad("clip_bound, alpha, beta and clip_floor must be > 0");
        }
        if let Some(s) = self.sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return bad("sigma must be >= 0");
            }
        }
        if !(self.sigma_l2 >= 0.0) {
            return bad("sigma_l2 must be >= 0");
        }
        if federated {
            self.fed_config(self.sigma.unwrap_or(1.0))
                .validate()
                .map_err(|e| DpwError::Config(e.to_string()))?;
            if self.rounds == 0 {
                return bad("rounds must be >= 1");
            }
        }
        if matches!(self.task, Task::NoiseCurve) && self.batch_sizes.is_empty() {
            return bad("batch_sizes must not be empty");
        }
        self.budget().map_err(|e| DpwError::Config(e.to_string()))?;
        Ok(())
    }
}
