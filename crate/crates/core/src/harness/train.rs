use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::accountant::{PrivacyBudget, PrivacyLedger};
use crate::data::{poisson_batches, Dataset};
use crate::dp::{self, Clipping, NoiseStreams, StepConfig};
use crate::error::{DpwError, Result};
use crate::harness::config::{ClipMode, ExperimentConfig};
use crate::nn::{self, ModelParams};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: u64,
    pub eps_spent: f64,
    pub train_acc: f64,
    /// Test accuracy, or pattern recall for pattern datasets.
    pub test_acc: Option<f64>,
    /// Per-group clipping bounds in effect after this epoch.
    pub clip_bounds: Vec<f64>,
    pub wall_ms: Option<u128>,
}

pub const METRICS_HEADER: &str = "step,epoch,eps_spent,train_acc,test_acc,clip_bounds,wall_ms";

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[MetricsRow]) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        let bounds: Vec<String> = r.clip_bounds.iter().map(f64::to_string).collect();
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.step,
            r.epoch,
            r.eps_spent,
            r.train_acc,
            r.test_acc.map(|v| v.to_string()).unwrap_or_default(),
            bounds.join(";"),
            r.wall_ms.map(|v| v.to_string()).unwrap_or_default(),
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct CentralRun {
    pub params: ModelParams,
    /// `None` for non-private runs.
    pub ledger: Option<PrivacyLedger>,
    pub metrics: Vec<MetricsRow>,
    pub stopped_by_budget: bool,
}

impl CentralRun {
    pub fn final_train_acc(&self) -> f64 {
        self.metrics.last().map_or(0.0, |m| m.train_acc)
    }

    pub fn max_train_acc(&self) -> f64 {
        self.metrics.iter().map(|m| m.train_acc).fold(0.0, f64::max)
    }

    pub fn final_test_acc(&self) -> Option<f64> {
        self.metrics.last().and_then(|m| m.test_acc)
    }
}

fn evaluate_row(
    params: &ModelParams,
    train: &Dataset,
    test: Option<&Dataset>,
) -> Result<(f64, Option<f64>)> {
    let train_acc = nn::evaluate(params, train.inputs(), train.labels())?;
    let test_acc = test
        .map(|t| nn::evaluate(params, t.inputs(), t.labels()))
        .transpose()?;
    Ok((train_acc, test_acc))
}

/// DPSGD over Poisson batches for `cfg.epochs` epochs of `⌊N/B⌋` steps.
///
/// With `enforce`, a step is only taken if charging it keeps ε within the
/// budget; the run stops at the first step that would overspend.
pub fn train_dp(
    cfg: &ExperimentConfig,
    sigma: f64,
    train: &Dataset,
    test: Option<&Dataset>,
    enforce: Option<&PrivacyBudget>,
) -> Result<CentralRun> {
    let started = Instant::now();
    let n = train.len();
    if n == 0 {
        return Err(DpwError::EmptyDataset);
    }
    let spec = cfg.model_spec();
    let mut params = nn::init_params(&spec)?;
    let mut velocity = params.zero_velocity();
    let groups = params.group_count();
    let adaptive = cfg.clip_mode == ClipMode::Adaptive;

    let step_cfg = StepConfig {
        lr: cfg.effective_lr(),
        momentum: cfg.momentum,
        lot_size: cfg.batch_size,
        sampling_rate: cfg.batch_size as f64 / n as f64,
        noise: cfg.noise(sigma),
        strict_accounting: cfg.strict_accounting,
    };
    let mut clipping = if adaptive {
        let mut r = rng::stream(cfg.seed, rng::TAG_CLIP_INIT);
        Clipping::Adaptive(dp::init_clip_state(
            &params,
            cfg.alpha,
            cfg.beta,
            cfg.clip_floor,
            cfg.batch_size,
            &mut r,
        )?)
    } else {
        Clipping::fixed(cfg.clip_bound, groups)
    };
    let mut ledger = step_cfg.new_ledger(adaptive, groups)?;
    let report_delta = enforce.map_or(cfg.budget()?.delta, |b| b.delta);
    let charged = StepConfig::charged_streams(adaptive);

    let mut noise = NoiseStreams::new(cfg.seed);
    let mut batches = poisson_batches(n, step_cfg.sampling_rate, rng::stream(cfg.seed, rng::TAG_SAMPLING))?;
    let steps_per_epoch = (n / cfg.batch_size) as u64;
    let mut metrics = Vec::new();
    let mut step = 0u64;
    let mut stopped_by_budget = false;

    'epochs: for epoch in 1..=cfg.epochs {
        for _ in 0..steps_per_epoch {
            if let Some(b) = enforce {
                let next = ledger.eps_if_charged(charged, b.delta)?;
                if next > b.epsilon {
                    if step == 0 {
                        return Err(DpwError::BudgetExhausted {
                            next,
                            budget: b.epsilon,
                        });
                    }
                    stopped_by_budget = true;
                    break 'epochs;
                }
            }
            let idx = batches.next().expect("poisson sampler is endless");
            let (x, y) = train.select(&idx);
            let out = dp::dpsgd_step(&params, &velocity, &x, &y, &step_cfg, &clipping, &ledger, &mut noise)?;
            params = out.params;
            velocity = out.velocity;
            clipping = out.clipping;
            ledger = out.ledger;
            step += 1;
        }
        let (train_acc, test_acc) = evaluate_row(&params, train, test)?;
        metrics.push(MetricsRow {
            step,
            epoch,
            eps_spent: ledger.eps_at_delta(report_delta)?.0,
            train_acc,
            test_acc,
            clip_bounds: clipping.bounds().to_vec(),
            wall_ms: cfg.record_timing.then(|| started.elapsed().as_millis()),
        });
    }

    if stopped_by_budget {
        let (train_acc, test_acc) = evaluate_row(&params, train, test)?;
        let last_epoch = metrics.last().map_or(0, |m: &MetricsRow| m.epoch);
        if metrics.last().is_none_or(|m| m.step != step) {
            metrics.push(MetricsRow {
                step,
                epoch: last_epoch + 1,
                eps_spent: ledger.eps_at_delta(report_delta)?.0,
                train_acc,
                test_acc,
                clip_bounds: clipping.bounds().to_vec(),
                wall_ms: cfg.record_timing.then(|| started.elapsed().as_millis()),
            });
        }
    }

    Ok(CentralRun {
        params,
        ledger: Some(ledger),
        metrics,
        stopped_by_budget,
    })
}

/// Momentum SGD on the mean loss of each Poisson batch; same sampling and
/// schedule as [`train_dp`]. Stops early once train accuracy reaches
/// `stop_at`, when given.
pub fn train_non_private(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    stop_at: Option<f64>,
) -> Result<CentralRun> {
    let started = Instant::now();
    let n = train.len();
    if n == 0 {
        return Err(DpwError::EmptyDataset);
    }
    let mut params = nn::init_params(&cfg.model_spec())?;
    let mut velocity = params.zero_velocity();
    let q = cfg.batch_size as f64 / n as f64;
    let mut batches = poisson_batches(n, q, rng::stream(cfg.seed, rng::TAG_SAMPLING))?;
    let steps_per_epoch = (n / cfg.batch_size) as u64;
    let lr = cfg.effective_lr();
    let mut metrics = Vec::new();
    let mut step = 0u64;

    for epoch in 1..=cfg.epochs {
        for _ in 0..steps_per_epoch {
            let idx = batches.next().expect("poisson sampler is endless");
            step += 1;
            if idx.is_empty() {
                continue;
            }
            let (x, y) = train.select(&idx);
            let (_, grad) = nn::loss_and_grad(&params, &x, &y)?;
            (params, velocity) = nn::apply_update(&params, &grad, lr, cfg.momentum, &velocity)?;
        }
        let (train_acc, test_acc) = evaluate_row(&params, train, test)?;
        metrics.push(MetricsRow {
            step,
            epoch,
            eps_spent: f64::INFINITY,
            train_acc,
            test_acc,
            clip_bounds: Vec::new(),
            wall_ms: cfg.record_timing.then(|| started.elapsed().as_millis()),
        });
        if stop_at.is_some_and(|t| train_acc >= t) {
            break;
        }
    }
    Ok(CentralRun {
        params,
        ledger: None,
        metrics,
        stopped_by_budget: false,
    })
}
