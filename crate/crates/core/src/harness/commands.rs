use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::accountant::{
    calibrate_with, noise_per_example_table, write_noise_curve_csv, AccountantState, NoiseCurveRow,
    PrivacyBudget, SIGMA_BRACKET, SIGMA_TOLERANCE,
};
use crate::data::{self, Dataset, DatasetMode};
use crate::dp::StepConfig;
use crate::error::{DpwError, Result};
use crate::federated::{self, write_round_metrics_csv, Probes, RoundMetrics};
use crate::harness::config::{ClipMode, ExperimentConfig, Task};
use crate::harness::train::{train_dp, train_non_private, write_metrics_csv, MetricsRow};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub sigma: f64,
    pub epsilon_target: f64,
    pub epsilon_achieved: f64,
    pub delta: f64,
    pub order: u32,
    pub sampling_rate: f64,
    pub steps: u64,
    pub dataset_size: usize,
    pub batch_size: usize,
    pub epochs: u64,
    pub clip_mode: ClipMode,
    pub sigma_l2: Option<f64>,
    pub strict_accounting: bool,
}

fn step_config(cfg: &ExperimentConfig, sigma: f64, n: usize) -> StepConfig {
    StepConfig {
        lr: cfg.effective_lr(),
        momentum: cfg.momentum,
        lot_size: cfg.batch_size,
        sampling_rate: cfg.batch_size as f64 / n as f64,
        noise: cfg.noise(sigma),
        strict_accounting: cfg.strict_accounting,
    }
}

/// ε and best order for a full central run at gradient multiplier `sigma`,
/// including the norm-query stream in adaptive mode.
fn central_eps(cfg: &ExperimentConfig, sigma: f64, budget: &PrivacyBudget) -> Result<(f64, u32)> {
    let n = cfg.dataset_size();
    let adaptive = cfg.clip_mode == ClipMode::Adaptive;
    let groups = cfg.model_spec().group_count();
    let mut ledger = step_config(cfg, sigma, n).new_ledger(adaptive, groups)?;
    let steps = cfg.total_steps();
    for &s in StepConfig::charged_streams(adaptive) {
        ledger.charge(s, steps);
    }
    ledger.eps_at_delta(budget.delta)
}

fn calibrate_central(cfg: &ExperimentConfig, budget: &PrivacyBudget) -> Result<f64> {
    if cfg.total_steps() == 0 {
        return Err(DpwError::Config("schedule has no steps (N < B or epochs = 0)".into()));
    }
    calibrate_with(budget.epsilon, SIGMA_BRACKET, SIGMA_TOLERANCE, |s| {
        Ok(central_eps(cfg, s, budget)?.0)
    })
}

fn calibrate_federated(cfg: &ExperimentConfig, budget: &PrivacyBudget) -> Result<f64> {
    calibrate_with(budget.epsilon, SIGMA_BRACKET, SIGMA_TOLERANCE, |s| {
        Ok(AccountantState::new(cfg.user_fraction, s)?
            .compose(cfg.rounds as u64)
            .eps_at_delta(budget.delta)?
            .0)
    })
}

/// Minimal gradient noise multiplier for the configured central schedule.
pub fn cmd_calibrate(cfg: &ExperimentConfig) -> Result<CalibrationReport> {
    cfg.validate()?;
    let budget = cfg.budget()?;
    let sigma = calibrate_central(cfg, &budget)?;
    let (eps, order) = central_eps(cfg, sigma, &budget)?;
    Ok(CalibrationReport {
        sigma,
        epsilon_target: budget.epsilon,
        epsilon_achieved: eps,
        delta: budget.delta,
        order,
        sampling_rate: cfg.sampling_rate(),
        steps: cfg.total_steps(),
        dataset_size: cfg.dataset_size(),
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        clip_mode: cfg.clip_mode,
        sigma_l2: (cfg.clip_mode == ClipMode::Adaptive).then_some(cfg.sigma_l2),
        strict_accounting: cfg.strict_accounting,
    })
}

/// Minimal σ and σ/B for every configured batch size, using `n_examples`
/// as the dataset size.
pub fn cmd_noise_curve(cfg: &ExperimentConfig) -> Result<Vec<NoiseCurveRow>> {
    cfg.validate()?;
    let budget = cfg.budget()?;
    noise_per_example_table(&budget, cfg.dataset_size(), cfg.epochs, &cfg.batch_sizes)
        .into_iter()
        .collect()
}

pub fn write_noise_curve<W: Write>(w: W, rows: &[NoiseCurveRow]) -> Result<()> {
    write_noise_curve_csv(w, rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SanityOutcome {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseArmReport {
    pub sigma: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub chance: f64,
    pub dp_max_train_acc: f64,
    pub dp_final_train_acc: f64,
    pub non_private_max_train_acc: f64,
    pub non_private_epochs: u64,
    pub dp_limit: f64,
    pub memorization_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternArmReport {
    pub sigma: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub non_private_centralized_recall: f64,
    pub dp_centralized_recall: f64,
    pub dp_distributed_recall: f64,
    pub distributed_pattern_count: usize,
    pub recall_low: f64,
    pub recall_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SanityReport {
    pub task: Task,
    pub outcome: SanityOutcome,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseArmReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pattern: Option<PatternArmReport>,
}

impl SanityReport {
    pub fn passed(&self) -> bool {
        self.outcome == SanityOutcome::Pass
    }
}

/// Runs the configured sanity check and its non-private twin.
pub fn cmd_sanity(cfg: &ExperimentConfig) -> Result<SanityReport> {
    cfg.validate()?;
    match cfg.task {
        Task::SanityNoise => sanity_noise(cfg),
        Task::SanityPattern => sanity_pattern(cfg),
        other => Err(DpwError::Config(format!("{other:?} is not a sanity task"))),
    }
}

fn sanity_noise(cfg: &ExperimentConfig) -> Result<SanityReport> {
    let budget = cfg.budget()?;
    let train = data::gen_noise_dataset(
        cfg.n_examples,
        (cfg.input_rows, cfg.input_cols),
        cfg.classes,
        cfg.seed,
    )?;
    let sigma = match cfg.sigma {
        Some(s) => s,
        None => calibrate_central(cfg, &budget)?,
    };
    let epsilon = central_eps(cfg, sigma, &budget)?.0;

    let dp_run = train_dp(cfg, sigma, &train, None, None)?;
    let twin = train_non_private(cfg, &train, None, Some(cfg.memorization_threshold))?;

    let chance = 1.0 / cfg.classes as f64;
    let dp_limit = chance + cfg.chance_margin;
    let report = NoiseArmReport {
        sigma,
        epsilon,
        delta: budget.delta,
        chance,
        dp_max_train_acc: dp_run.max_train_acc(),
        dp_final_train_acc: dp_run.final_train_acc(),
        non_private_max_train_acc: twin.max_train_acc(),
        non_private_epochs: twin.metrics.last().map_or(0, |m| m.epoch),
        dp_limit,
        memorization_threshold: cfg.memorization_threshold,
    };
    let pass = report.dp_max_train_acc <= dp_limit
        && report.non_private_max_train_acc >= cfg.memorization_threshold;
    Ok(SanityReport {
        task: Task::SanityNoise,
        outcome: if pass { SanityOutcome::Pass } else { SanityOutcome::Fail },
        noise: Some(report),
        pattern: None,
    })
}

fn final_recall(metrics: &[RoundMetrics]) -> f64 {
    metrics.last().and_then(|m| m.pattern_recall).unwrap_or(0.0)
}

fn sanity_pattern(cfg: &ExperimentConfig) -> Result<SanityReport> {
    let budget = cfg.user_budget()?;
    let spec = cfg.dataset_spec();
    let centralized = data::gen_user_pattern_dataset(&data::DatasetSpec {
        mode: DatasetMode::PatternCentralized,
        ..spec.clone()
    })?;
    let distributed = data::gen_user_pattern_dataset(&data::DatasetSpec {
        mode: DatasetMode::PatternDistributed,
        ..spec.clone()
    })?;
    let probes = Probes {
        eval: None,
        pattern: Some(data::pattern_probe_set(cfg.probe_size, &spec, cfg.seed)?),
    };
    let sigma = match cfg.sigma {
        Some(s) => s,
        None => calibrate_federated(cfg, &budget)?,
    };
    let model = cfg.model_spec();

    let open = federated::FedConfig {
        sigma: 0.0,
        update_clip: f64::INFINITY,
        ..cfg.fed_config(0.0)
    };
    let private = cfg.fed_config(sigma);
    let twin = federated::run_training(&centralized, &model, &open, None, &probes)?;
    let dp_c = federated::run_training(&centralized, &model, &private, None, &probes)?;
    let dp_d = federated::run_training(&distributed, &model, &private, None, &probes)?;

    let report = PatternArmReport {
        sigma,
        epsilon: dp_c.accountant.eps_at_delta(budget.delta)?.0,
        delta: budget.delta,
        non_private_centralized_recall: final_recall(&twin.metrics),
        dp_centralized_recall: final_recall(&dp_c.metrics),
        dp_distributed_recall: final_recall(&dp_d.metrics),
        distributed_pattern_count: distributed.data().patterned_count(),
        recall_low: cfg.recall_low,
        recall_high: cfg.recall_high,
    };
    let pass = report.dp_centralized_recall <= cfg.recall_low
        && report.non_private_centralized_recall >= cfg.recall_high;
    Ok(SanityReport {
        task: Task::SanityPattern,
        outcome: if pass { SanityOutcome::Pass } else { SanityOutcome::Fail },
        noise: None,
        pattern: Some(report),
    })
}

#[derive(Debug, Clone)]
pub enum TrainOutput {
    Central { sigma: f64, metrics: Vec<MetricsRow>, stopped_by_budget: bool },
    Federated { sigma: f64, metrics: Vec<RoundMetrics> },
}

impl TrainOutput {
    pub fn sigma(&self) -> f64 {
        match self {
            TrainOutput::Central { sigma, .. } | TrainOutput::Federated { sigma, .. } => *sigma,
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        match self {
            TrainOutput::Central { metrics, .. } => write_metrics_csv(w, metrics),
            TrainOutput::Federated { metrics, .. } => write_round_metrics_csv(w, metrics),
        }
    }
}

/// Central training data plus an optional evaluation set.
pub(crate) fn central_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Option<Dataset>)> {
    let spec = cfg.dataset_spec();
    match cfg.dataset_mode {
        DatasetMode::Noise => Ok((
            data::gen_noise_dataset(cfg.n_examples, (cfg.input_rows, cfg.input_cols), cfg.classes, cfg.seed)?,
            None,
        )),
        DatasetMode::Blobs => Ok((
            data::gen_blobs_dataset(&spec, cfg.n_examples, rng::TAG_TRAIN)?,
            Some(data::gen_blobs_dataset(&spec, cfg.test_examples, rng::TAG_TEST)?),
        )),
        DatasetMode::PatternCentralized | DatasetMode::PatternDistributed => Ok((
            data::gen_user_pattern_dataset(&spec)?.data().clone(),
            Some(data::pattern_probe_set(cfg.probe_size, &spec, cfg.seed)?),
        )),
    }
}

/// Private training within the budget: central DPSGD for `train`, DP-FedAvg
/// for `train-federated`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    match cfg.task {
        Task::Train => {
            let budget = cfg.budget()?;
            let (train, test) = central_datasets(cfg)?;
            let sigma = match cfg.sigma {
                Some(s) => s,
                None => calibrate_central(cfg, &budget)?,
            };
            let run = train_dp(cfg, sigma, &train, test.as_ref(), Some(&budget))?;
            Ok(TrainOutput::Central {
                sigma,
                metrics: run.metrics,
                stopped_by_budget: run.stopped_by_budget,
            })
        }
        Task::TrainFederated => {
            let budget = cfg.user_budget()?;
            let dataset = data::gen_user_pattern_dataset(&cfg.dataset_spec())?;
            let probes = Probes {
                eval: None,
                pattern: Some(data::pattern_probe_set(cfg.probe_size, &cfg.dataset_spec(), cfg.seed)?),
            };
            let sigma = match cfg.sigma {
                Some(s) => s,
                None => calibrate_federated(cfg, &budget)?,
            };
            let run = federated::run_training(
                &dataset,
                &cfg.model_spec(),
                &cfg.fed_config(sigma),
                Some(&budget),
                &probes,
            )?;
            Ok(TrainOutput::Federated {
                sigma,
                metrics: run.metrics,
            })
        }
        other => Err(DpwError::Config(format!("{other:?} is not a training task"))),
    }
}
