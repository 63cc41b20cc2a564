//! DPSGD with per-group clipping and the adaptive clipping schedule.
//!
//! Each clipping group (one weight tensor or one bias vector) has its own
//! bound `C^l`. A step clips every example's group gradient to `C^l`, sums,
//! adds `N(0, (σ·C^l)²)` per coordinate and divides by the nominal lot size.
//!
//! In adaptive mode the bounds for the next step come from a noisy mean of
//! this batch's per-example norms: each norm is clipped at the norm-query
//! bound `C_ℓ2^l`, summed, noised with `N(0, (σ_ℓ2·C_ℓ2^l)²)` and divided by
//! the lot size. Then `C^l ← max(floor, α·mean)` and `C_ℓ2^l ← β·C^l_prev`.
//! The norm query is charged to the ledger as its own mechanism stream.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::accountant::{AccountantState, PrivacyLedger};
use crate::error::{DpwError, Result};
use crate::nn::{self, ModelParams, ParamSet, PerExampleGrads, Velocity};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const DEFAULT_FLOOR: f64 = 1e-6;
pub const GRADIENT_STREAM: usize = 0;
pub const NORM_STREAM: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Gradient noise multiplier. Zero disables the mechanism.
    pub sigma: f64,
    /// Norm-query noise multiplier (adaptive clipping only).
    pub sigma_l2: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipState {
    bounds: Vec<f64>,
    norm_bounds: Vec<f64>,
    alpha: f64,
    beta: f64,
    floor: f64,
    round: u64,
}

impl ClipState {
    pub fn new(bounds: Vec<f64>, norm_bounds: Vec<f64>, alpha: f64, beta: f64, floor: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0 && floor > 0.0) {
            return Err(DpwError::param("alpha, beta and floor must be > 0"));
        }
        if bounds.len() != norm_bounds.len() || bounds.is_empty() {
            return Err(DpwError::param("need one bound and one norm bound per group"));
        }
        Ok(Self {
            bounds: bounds.into_iter().map(|b| b.max(floor)).collect(),
            norm_bounds: norm_bounds.into_iter().map(|b| b.max(floor)).collect(),
            alpha,
            beta,
            floor,
            round: 0,
        })
    }

    /// Current gradient clipping bounds `C_t^l`.
    pub fn bounds(&self) -> &[f64] {
        &self.bounds
    }

    /// Current norm-query bounds `C_ℓ2,t^l`.
    pub fn norm_bounds(&self) -> &[f64] {
        &self.norm_bounds
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn round(&self) -> u64 {
        self.round
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Clipping {
    Fixed(Vec<f64>),
    Adaptive(ClipState),
}

impl Clipping {
    /// The same fixed bound for every group.
    pub fn fixed(bound: f64, groups: usize) -> Self {
        Clipping::Fixed(vec![bound; groups])
    }

    pub fn bounds(&self) -> &[f64] {
        match self {
            Clipping::Fixed(b) => b,
            Clipping::Adaptive(s) => s.bounds(),
        }
    }

    pub fn is_adaptive(&self) -> bool {
        matches!(self, Clipping::Adaptive(_))
    }
}

fn check_bounds(bounds: &[f64], groups: usize) -> Result<()> {
    if bounds.len() != groups {
        return Err(DpwError::ShapeMismatch {
            expected: vec![groups],
            actual: vec![bounds.len()],
        });
    }
    if let Some(b) = bounds.iter().find(|&&b| !(b > 0.0)) {
        return Err(DpwError::param(format!("clipping bounds must be > 0, got {b}")));
    }
    Ok(())
}

/// `1 / max(1, ‖g‖/C)`.
pub fn clip_factor(norm: f64, bound: f64) -> f64 {
    1.0 / (norm / bound).max(1.0)
}

/// Scales each example-group gradient to norm at most `bounds[g]`; also
/// returns the post-clipping norms `min(‖g‖, C)` as `[example][group]`.
pub fn clip_per_example(grads: &PerExampleGrads, bounds: &[f64]) -> Result<(PerExampleGrads, Vec<Vec<f64>>)> {
    check_bounds(bounds, grads.num_groups())?;
    let mut clipped = grads.clone();
    let mut norms = vec![vec![0.0; bounds.len()]; grads.batch_size()];
    for (i, row) in norms.iter_mut().enumerate() {
        for (g, &c) in bounds.iter().enumerate() {
            let n = grads.norm(i, g);
            let f = clip_factor(n, c);
            if f < 1.0 {
                clipped.example_mut(i, g).iter_mut().for_each(|x| *x *= f);
            }
            row[g] = n.min(c);
        }
    }
    Ok((clipped, norms))
}

/// Adds `N(0, (σ·C^g)²)` to every coordinate of group `g`, group by group.
fn add_group_noise(sum: &mut ParamSet, bounds: &[f64], sigma: f64, rng: &mut Rng) {
    if sigma == 0.0 {
        return;
    }
    for (g, &c) in bounds.iter().enumerate() {
        let std = sigma * c;
        for x in sum.group_mut(g).data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *x += std * z;
        }
    }
}

/// `(Σ_i clipped_i + N(0, (σ·C^g)²)) / lot_size` per group.
pub fn noisy_aggregate(
    clipped: &PerExampleGrads,
    bounds: &[f64],
    sigma: f64,
    lot_size: usize,
    rng: &mut Rng,
) -> Result<ParamSet> {
    check_bounds(bounds, clipped.num_groups())?;
    if lot_size == 0 {
        return Err(DpwError::param("lot size must be >= 1"));
    }
    if !(sigma >= 0.0) {
        return Err(DpwError::param(format!("sigma must be >= 0, got {sigma}")));
    }
    let mut sum = clipped.sum();
    add_group_noise(&mut sum, bounds, sigma, rng);
    sum.scale(1.0 / lot_size as f64);
    Ok(sum)
}

/// Noisy mean of per-example norms per group:
/// `(Σ_i min(n_i^g, C_ℓ2^g) + N(0, (σ_ℓ2·C_ℓ2^g)²)) / lot_size`.
pub fn private_mean_norms(
    norms: &[Vec<f64>],
    state: &ClipState,
    sigma_l2: f64,
    lot_size: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if lot_size == 0 {
        return Err(DpwError::param("lot size must be >= 1"));
    }
    let groups = state.norm_bounds.len();
    if let Some(row) = norms.iter().find(|r| r.len() != groups) {
        return Err(DpwError::ShapeMismatch {
            expected: vec![groups],
            actual: vec![row.len()],
        });
    }
    Ok((0..groups)
        .map(|g| {
            let c = state.norm_bounds[g];
            let sum: f64 = norms.iter().map(|r| r[g].min(c)).sum();
            let noise = if sigma_l2 > 0.0 {
                sigma_l2 * c * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            (sum + noise) / lot_size as f64
        })
        .collect())
}

/// Initial bounds from one backward pass on a synthetic noise batch:
/// `C_ℓ2,0 = mean norm`, `C_0 = α·mean norm`, both clamped at `floor`.
pub fn init_clip_state(
    model: &ModelParams,
    alpha: f64,
    beta: f64,
    floor: f64,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<ClipState> {
    if batch_size == 0 {
        return Err(DpwError::param("noise batch size must be >= 1"));
    }
    let dim = model.input_dim();
    let inputs: Vec<f64> = (0..batch_size * dim).map(|_| rng.random::<f64>()).collect();
    let labels: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..model.classes())).collect();
    let trace = nn::backprop(model, &Tensor::matrix(batch_size, dim, inputs)?, &labels)?;
    let norms = trace.group_norms();
    let groups = model.group_count();
    let mean: Vec<f64> = (0..groups)
        .map(|g| norms.iter().map(|r| r[g]).sum::<f64>() / batch_size as f64)
        .collect();
    let bounds = mean.iter().map(|m| alpha * m).collect();
    ClipState::new(bounds, mean, alpha, beta, floor)
}

/// `C_t = max(floor, α·dp_mean)`, `C_ℓ2,t = max(floor, β·C_{t−1})`.
pub fn advance_clip_state(state: &ClipState, dp_mean_norms: &[f64]) -> Result<ClipState> {
    if dp_mean_norms.len() != state.bounds.len() {
        return Err(DpwError::ShapeMismatch {
            expected: vec![state.bounds.len()],
            actual: vec![dp_mean_norms.len()],
        });
    }
    let mut next = state.clone();
    for g in 0..state.bounds.len() {
        next.norm_bounds[g] = (state.beta * state.bounds[g]).max(state.floor);
        next.bounds[g] = (state.alpha * dp_mean_norms[g]).max(state.floor);
    }
    next.round += 1;
    Ok(next)
}

/// Dedicated noise RNGs per mechanism, so the draw order of one cannot
/// shift the other.
#[derive(Debug, Clone)]
pub struct NoiseStreams {
    pub gradient: Rng,
    pub norm: Rng,
}

impl NoiseStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            gradient: rng::stream(seed, rng::TAG_GRAD_NOISE),
            norm: rng::stream(seed, rng::TAG_NORM_NOISE),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Nominal (expected) lot size `|L|`; the noisy sum is divided by this.
    pub lot_size: usize,
    /// Poisson sampling ratio charged to the accountant.
    pub sampling_rate: f64,
    pub noise: NoiseConfig,
    /// Charge `σ/√m` per release (m = group count) instead of `σ`.
    pub strict_accounting: bool,
}

impl StepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lot_size == 0 {
            return Err(DpwError::param("lot size must be >= 1"));
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate <= 1.0) {
            return Err(DpwError::param("sampling rate must be in (0, 1]"));
        }
        if !(self.noise.sigma >= 0.0 && self.noise.sigma_l2 >= 0.0) {
            return Err(DpwError::param("noise multipliers must be >= 0"));
        }
        Ok(())
    }

    /// Noise multiplier the accountant sees for a release with multiplier `sigma`.
    pub fn charged_multiplier(&self, sigma: f64, groups: usize) -> f64 {
        if self.strict_accounting {
            sigma / (groups as f64).sqrt()
        } else {
            sigma
        }
    }

    /// Ledger with a gradient stream and, for adaptive clipping, a norm stream.
    pub fn new_ledger(&self, adaptive: bool, groups: usize) -> Result<PrivacyLedger> {
        let q = self.sampling_rate;
        let mut streams = vec![AccountantState::new(q, self.charged_multiplier(self.noise.sigma, groups))?];
        if adaptive {
            streams.push(AccountantState::new(
                q,
                self.charged_multiplier(self.noise.sigma_l2, groups),
            )?);
        }
        PrivacyLedger::new(streams)
    }

    /// Streams charged by one step.
    pub fn charged_streams(adaptive: bool) -> &'static [usize] {
        if adaptive {
            &[GRADIENT_STREAM, NORM_STREAM]
        } else {
            &[GRADIENT_STREAM]
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub params: ModelParams,
    pub velocity: Velocity,
    pub clipping: Clipping,
    pub ledger: PrivacyLedger,
    /// Mean loss over the realized batch (0 for an empty batch).
    pub mean_loss: f64,
    pub batch_size: usize,
}

/// The noisy clipped mean gradient for one batch, without materializing
/// per-example gradients. Returns the gradient and the raw per-example norms.
pub fn private_gradient(
    params: &ModelParams,
    inputs: &Tensor,
    labels: &[usize],
    bounds: &[f64],
    sigma: f64,
    lot_size: usize,
    rng: &mut Rng,
) -> Result<(ParamSet, Vec<Vec<f64>>, f64)> {
    check_bounds(bounds, params.group_count())?;
    let trace = nn::backprop(params, inputs, labels)?;
    let norms = trace.group_norms();
    let scales: Vec<Vec<f64>> = norms
        .iter()
        .map(|r| r.iter().zip(bounds).map(|(&n, &c)| clip_factor(n, c)).collect())
        .collect();
    let mut sum = trace.weighted_group_sums(&scales);
    add_group_noise(&mut sum, bounds, sigma, rng);
    sum.scale(1.0 / lot_size as f64);
    Ok((sum, norms, trace.mean_loss()))
}

/// One DPSGD step over a (possibly empty) Poisson batch.
#[allow(clippy::too_many_arguments)]
pub fn dpsgd_step(
    params: &ModelParams,
    velocity: &Velocity,
    inputs: &Tensor,
    labels: &[usize],
    cfg: &StepConfig,
    clipping: &Clipping,
    ledger: &PrivacyLedger,
    noise: &mut NoiseStreams,
) -> Result<StepOutput> {
    cfg.validate()?;
    let adaptive = clipping.is_adaptive();
    if adaptive && ledger.streams().len() < 2 {
        return Err(DpwError::param("adaptive clipping needs a ledger with a norm stream"));
    }
    let mut ledger = ledger.clone();
    for &s in StepConfig::charged_streams(adaptive) {
        ledger.charge(s, 1);
    }

    // An empty batch still releases noise; skipping the step would reveal it.
    let (grad, norms, mean_loss) = if labels.is_empty() {
        check_bounds(clipping.bounds(), params.group_count())?;
        let mut grad = ParamSet::zeros_like(params.params());
        add_group_noise(&mut grad, clipping.bounds(), cfg.noise.sigma, &mut noise.gradient);
        grad.scale(1.0 / cfg.lot_size as f64);
        (grad, Vec::new(), 0.0)
    } else {
        private_gradient(
            params,
            inputs,
            labels,
            clipping.bounds(),
            cfg.noise.sigma,
            cfg.lot_size,
            &mut noise.gradient,
        )?
    };
    let (params, velocity) = nn::apply_update(params, &grad, cfg.lr, cfg.momentum, velocity)?;

    let clipping = match clipping {
        Clipping::Fixed(b) => Clipping::Fixed(b.clone()),
        Clipping::Adaptive(state) => {
            let means = private_mean_norms(&norms, state, cfg.noise.sigma_l2, cfg.lot_size, &mut noise.norm)?;
            Clipping::Adaptive(advance_clip_state(state, &means)?)
        }
    };

    Ok(StepOutput {
        params,
        velocity,
        clipping,
        ledger,
        mean_loss,
        batch_size: labels.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, ModelSpec};

    fn grads_with_norm(norm: f64) -> PerExampleGrads {
        // single linear layer 1 -> 2; weight grad = x ⊗ δ
        let w = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let p = ModelParams::from_parts(vec![1, 2], ParamSet::new(vec![w, Tensor::zeros(vec![2])])).unwrap();
        // zero logits: δ = (0.5, -0.5) for label 1, ‖δ‖ = 1/√2
        let x = norm * std::f64::consts::SQRT_2;
        let (_, g) = nn::loss_and_per_example_grads(&p, &Tensor::matrix(1, 1, vec![x]).unwrap(), &[1]).unwrap();
        g
    }

    #[test]
    fn clip_halves_large_gradient() {
        let g = grads_with_norm(4.0);
        assert!((g.norm(0, 0) - 4.0).abs() < 1e-12);
        let (c, norms) = clip_per_example(&g, &[2.0, 10.0]).unwrap();
        assert!((c.norm(0, 0) - 2.0).abs() < 1e-12);
        assert!((norms[0][0] - 2.0).abs() < 1e-12);
        for (a, b) in c.example(0, 0).iter().zip(g.example(0, 0)) {
            assert!((a - 0.5 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn clip_leaves_small_gradient() {
        let g = grads_with_norm(1.0);
        let (c, norms) = clip_per_example(&g, &[2.0, 2.0]).unwrap();
        assert_eq!(c, g);
        assert!((norms[0][0] - 1.0).abs() < 1e-12);
        let zero = grads_with_norm(0.0);
        let (cz, nz) = clip_per_example(&zero, &[2.0, 2.0]).unwrap();
        assert!(cz.example(0, 0).iter().all(|&v| v == 0.0));
        assert_eq!(nz[0][0], 0.0);
    }

    #[test]
    fn aggregate_without_noise_is_exact_mean() {
        let g = grads_with_norm(1.0);
        let mut r = rng::stream(0, "t");
        let agg = noisy_aggregate(&g, &[5.0, 5.0], 0.0, 1, &mut r).unwrap();
        assert_eq!(agg, g.sum());
    }

    #[test]
    fn aggregate_is_seeded() {
        let g = grads_with_norm(1.0);
        let a = noisy_aggregate(&g, &[1.0, 1.0], 1.0, 4, &mut rng::stream(3, "t")).unwrap();
        let b = noisy_aggregate(&g, &[1.0, 1.0], 1.0, 4, &mut rng::stream(3, "t")).unwrap();
        assert_eq!(a, b);
    }

    fn state(bounds: &[f64], norm_bounds: &[f64], alpha: f64, beta: f64) -> ClipState {
        ClipState::new(bounds.to_vec(), norm_bounds.to_vec(), alpha, beta, DEFAULT_FLOOR).unwrap()
    }

    #[test]
    fn noiseless_mean_norms() {
        let mut r = rng::stream(0, "t");
        let s = state(&[1.0], &[2.0], 1.0, 2.0);
        let m = private_mean_norms(&[vec![1.0], vec![1.0], vec![1.0]], &s, 0.0, 3, &mut r).unwrap();
        assert_eq!(m, vec![1.0]);
        let s = state(&[1.0], &[4.0], 1.0, 2.0);
        let m = private_mean_norms(&[vec![3.0], vec![5.0]], &s, 0.0, 2, &mut r).unwrap();
        assert_eq!(m, vec![3.5]);
    }

    #[test]
    fn advance_rules() {
        let s = state(&[1.5], &[1.0], 1.1, 2.0);
        let next = advance_clip_state(&s, &[1.0]).unwrap();
        assert!((next.bounds()[0] - 1.1).abs() < 1e-15);
        assert_eq!(next.norm_bounds()[0], 3.0);
        assert_eq!(next.round(), 1);
        let clamped = advance_clip_state(&s, &[-0.4]).unwrap();
        assert_eq!(clamped.bounds()[0], DEFAULT_FLOOR);
    }

    #[test]
    fn init_from_noise_batch() {
        let model = init_params(&ModelSpec::new(vec![6, 5, 3], 1)).unwrap();
        let s = init_clip_state(&model, 1.0, 2.0, DEFAULT_FLOOR, 32, &mut rng::stream(0, "c")).unwrap();
        assert_eq!(s.bounds().len(), 4);
        assert_eq!(s.bounds(), s.norm_bounds());
        let s2 = init_clip_state(&model, 1.5, 2.0, DEFAULT_FLOOR, 32, &mut rng::stream(0, "c")).unwrap();
        for (a, b) in s2.bounds().iter().zip(s.norm_bounds()) {
            assert!((a - 1.5 * b).abs() < 1e-12);
        }

        let zero = ModelParams::from_parts(
            vec![6, 5, 3],
            ParamSet::zeros_like(model.params()),
        )
        .unwrap();
        let z = init_clip_state(&zero, 1.0, 2.0, DEFAULT_FLOOR, 8, &mut rng::stream(0, "c")).unwrap();
        // first layer sees no signal through zero weights
        assert_eq!(z.bounds()[0], DEFAULT_FLOOR);
        assert_eq!(z.bounds()[1], DEFAULT_FLOOR);
    }

    #[test]
    fn empty_batch_releases_noise() {
        let model = init_params(&ModelSpec::new(vec![4, 3], 0)).unwrap();
        let cfg = StepConfig {
            lr: 0.1,
            momentum: 0.0,
            lot_size: 8,
            sampling_rate: 0.1,
            noise: NoiseConfig { sigma: 1.0, sigma_l2: 2.0, seed: 0 },
            strict_accounting: false,
        };
        let clip = Clipping::fixed(1.0, 2);
        let ledger = cfg.new_ledger(false, 2).unwrap();
        let out = dpsgd_step(
            &model,
            &model.zero_velocity(),
            &Tensor::matrix(0, 4, vec![]).unwrap(),
            &[],
            &cfg,
            &clip,
            &ledger,
            &mut NoiseStreams::new(0),
        )
        .unwrap();
        assert_ne!(out.params, model);
        assert_eq!(out.batch_size, 0);
        assert_eq!(out.ledger.stream(0).steps(), 1);
    }

    #[test]
    fn strict_accounting_divides_by_root_groups() {
        let cfg = StepConfig {
            lr: 0.1,
            momentum: 0.0,
            lot_size: 8,
            sampling_rate: 0.1,
            noise: NoiseConfig { sigma: 2.0, sigma_l2: 4.0, seed: 0 },
            strict_accounting: true,
        };
        let ledger = cfg.new_ledger(true, 4).unwrap();
        assert_eq!(ledger.stream(0).sigma(), 1.0);
        assert_eq!(ledger.stream(1).sigma(), 2.0);
    }
}
