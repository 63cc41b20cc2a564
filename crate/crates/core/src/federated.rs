//! DP-FedAvg simulation with user-level clipping.
//!
//! Each round samples users independently with probability `q_u`, runs
//! local SGD for every sampled user, clips each user's whole parameter delta
//! to one ℓ2 bound `C_u`, and the server adds `N(0, (σ·C_u)²)` per coordinate
//! to the sum before dividing by the expected participant count `q_u·U`.
//! Users are required to hold the same number of records, so the weighted
//! FedAvg estimator reduces to this unweighted form.

use std::io::Write;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::accountant::{AccountantState, PrivacyBudget};
use crate::data::{Dataset, UserDataset};
use crate::dp::clip_factor;
use crate::error::{DpwError, Result};
use crate::nn::{self, ModelParams, ModelSpec, ParamSet};
use crate::par;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    /// Per-round user sampling probability `q_u`.
    pub user_fraction: f64,
    pub local_steps: usize,
    pub local_lr: f64,
    /// Flat ℓ2 bound on each user's delta; `f64::INFINITY` disables clipping.
    pub update_clip: f64,
    pub sigma: f64,
    pub rounds: usize,
    pub seed: u64,
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.user_fraction > 0.0 && self.user_fraction <= 1.0) {
            return Err(DpwError::param("user fraction must be in (0, 1]"));
        }
        if self.local_steps == 0 || !(self.local_lr > 0.0) {
            return Err(DpwError::param("local steps and local lr must be positive"));
        }
        if !(self.update_clip > 0.0) {
            return Err(DpwError::param("update clip must be > 0"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(DpwError::param("sigma must be >= 0"));
        }
        if self.sigma > 0.0 && self.update_clip.is_infinite() {
            return Err(DpwError::param("noise needs a finite update clip"));
        }
        Ok(())
    }
}

/// Runs `local_steps` full-batch SGD steps on one user's records and returns
/// `final − global`.
pub fn local_update(
    global: &ModelParams,
    inputs: &Tensor,
    labels: &[usize],
    local_steps: usize,
    local_lr: f64,
) -> Result<ParamSet> {
    if labels.is_empty() {
        return Err(DpwError::EmptyDataset);
    }
    let mut params = global.clone();
    let mut velocity = params.zero_velocity();
    for _ in 0..local_steps {
        let (_, grad) = nn::loss_and_grad(&params, inputs, labels)?;
        (params, velocity) = nn::apply_update(&params, &grad, local_lr, 0.0, &velocity)?;
    }
    let mut delta = params.params().clone();
    delta.add_scaled(global.params(), -1.0);
    Ok(delta)
}

/// Users participating this round, in increasing index order.
pub fn sample_users(users: usize, q: f64, rng: &mut Rng) -> Vec<usize> {
    if q >= 1.0 {
        return (0..users).collect();
    }
    (0..users).filter(|_| rng.random::<f64>() < q).collect()
}

/// Clipped deltas of the given users, with their pre-clipping norms.
pub fn clipped_deltas(
    global: &ModelParams,
    dataset: &UserDataset,
    users: &[usize],
    cfg: &FedConfig,
) -> Result<Vec<(ParamSet, f64)>> {
    par::map_slice(users, |&u| {
        let (x, y) = dataset.user_records(u);
        let mut delta = local_update(global, &x, &y, cfg.local_steps, cfg.local_lr)?;
        let norm = delta.norm();
        let f = clip_factor(norm, cfg.update_clip);
        if f < 1.0 {
            delta.scale(f);
        }
        Ok((delta, norm))
    })
    .into_iter()
    .collect()
}

/// Pre-noise server aggregate: `Σ clipped deltas / (q_u·U)`, summed in user order.
pub fn aggregate(global: &ModelParams, deltas: &[(ParamSet, f64)], users: usize, q: f64) -> ParamSet {
    let mut sum = ParamSet::zeros_like(global.params());
    for (d, _) in deltas {
        sum.add_scaled(d, 1.0);
    }
    sum.scale(1.0 / (q * users as f64));
    sum
}

/// RNG streams owned by the server.
#[derive(Debug, Clone)]
pub struct FedStreams {
    pub sampling: Rng,
    pub noise: Rng,
}

impl FedStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            sampling: rng::stream(seed, rng::TAG_SAMPLING),
            noise: rng::stream(seed, rng::TAG_GRAD_NOISE),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RoundOutput {
    pub params: ModelParams,
    pub accountant: AccountantState,
    pub sampled: Vec<usize>,
    /// Pre-clipping delta norms of the sampled users.
    pub delta_norms: Vec<f64>,
}

pub fn run_round(
    global: &ModelParams,
    dataset: &UserDataset,
    cfg: &FedConfig,
    accountant: &AccountantState,
    streams: &mut FedStreams,
) -> Result<RoundOutput> {
    cfg.validate()?;
    let users = dataset.users();
    let sampled = sample_users(users, cfg.user_fraction, &mut streams.sampling);
    let accountant = accountant.compose(1);
    // No early exit for an empty sample: the noise is released regardless.
    let deltas = clipped_deltas(global, dataset, &sampled, cfg)?;
    let delta_norms = deltas.iter().map(|(_, n)| *n).collect();
    let mut update = aggregate(global, &deltas, users, cfg.user_fraction);
    if cfg.sigma > 0.0 {
        let std = cfg.sigma * cfg.update_clip / (cfg.user_fraction * users as f64);
        for g in 0..update.num_groups() {
            for x in update.group_mut(g).data_mut() {
                *x += std * streams.noise.sample::<f64, _>(StandardNormal);
            }
        }
    }
    let mut params = global.clone();
    params.params_mut().add_scaled(&update, 1.0);
    Ok(RoundOutput {
        params,
        accountant,
        sampled,
        delta_norms,
    })
}

/// Evaluation sets checked after every round.
#[derive(Debug, Clone, Default)]
pub struct Probes {
    /// Accuracy set; the training records when `None`.
    pub eval: Option<Dataset>,
    /// Patterned probe inputs labeled with the pattern label.
    pub pattern: Option<Dataset>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub eps: f64,
    pub global_acc: f64,
    pub pattern_recall: Option<f64>,
}

pub const ROUND_METRICS_HEADER: &str = "round,eps,global_acc,pattern_recall";

#[derive(Debug, Clone)]
pub struct FedRun {
    pub params: ModelParams,
    pub accountant: AccountantState,
    pub metrics: Vec<RoundMetrics>,
}

/// Runs up to `cfg.rounds` rounds from a fresh model. With a budget, a round
/// is only run if charging it keeps ε within the budget; without one the run
/// is unconstrained (ε is still reported).
pub fn run_training(
    dataset: &UserDataset,
    model_spec: &ModelSpec,
    cfg: &FedConfig,
    budget: Option<&PrivacyBudget>,
    probes: &Probes,
) -> Result<FedRun> {
    cfg.validate()?;
    let mut params = nn::init_params(model_spec)?;
    let mut accountant = AccountantState::new(cfg.user_fraction, cfg.sigma)?;
    let mut streams = FedStreams::new(cfg.seed);
    let mut metrics = Vec::with_capacity(cfg.rounds);
    let delta = budget.map_or(1e-5, |b| b.delta);

    for round in 1..=cfg.rounds {
        if let Some(b) = budget {
            let next = accountant.compose(1).eps_at_delta(b.delta)?.0;
            if next > b.epsilon {
                if round == 1 {
                    return Err(DpwError::BudgetExhausted {
                        next,
                        budget: b.epsilon,
                    });
                }
                break;
            }
        }
        let out = run_round(&params, dataset, cfg, &accountant, &mut streams)?;
        params = out.params;
        accountant = out.accountant;

        let eval = probes.eval.as_ref().unwrap_or(dataset.data());
        let global_acc = nn::evaluate(&params, eval.inputs(), eval.labels())?;
        let pattern_recall = probes
            .pattern
            .as_ref()
            .map(|p| nn::evaluate(&params, p.inputs(), p.labels()))
            .transpose()?;
        metrics.push(RoundMetrics {
            round,
            eps: accountant.eps_at_delta(delta)?.0,
            global_acc,
            pattern_recall,
        });
    }
    Ok(FedRun {
        params,
        accountant,
        metrics,
    })
}

pub fn write_round_metrics_csv<W: Write>(mut w: W, rows: &[RoundMetrics]) -> Result<()> {
    writeln!(w, "{ROUND_METRICS_HEADER}")?;
    for r in rows {
        let recall = r.pattern_recall.map(|v| v.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{}", r.round, r.eps, r.global_acc, recall)?;
    }
    Ok(())
}
