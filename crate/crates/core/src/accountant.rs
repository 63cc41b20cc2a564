//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! Per-step RDP at integer order λ is `ln(A_λ)/(λ−1)` with
//!
//! ```text
//! A_λ = Σ_{k=0}^{λ} C(λ,k) (1−q)^{λ−k} q^k exp((k²−k)/(2σ²))
//! ```
//!
//! evaluated as a log-sum-exp. Composition is additive per order and the
//! conversion to (ε, δ) is `min_λ rdp(λ) + ln(1/δ)/(λ−1)`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{DpwError, Result};
use crate::par;

/// Lower and upper ends of the noise-multiplier search.
pub const SIGMA_BRACKET: (f64, f64) = (0.3, 100.0);
/// Absolute tolerance the bisection must reach.
pub const SIGMA_TOLERANCE: f64 = 1e-4;

/// Integers 2..=64 plus 128 and 256.
pub fn default_orders() -> Vec<u32> {
    (2..=64).chain([128, 256]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        let b = Self { epsilon, delta };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(DpwError::param(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(DpwError::param(format!("delta must be in (0, 1), got {}", self.delta)));
        }
        Ok(())
    }

    /// `δ = N^-1.1`.
    pub fn delta_for_dataset(n: usize) -> f64 {
        (n as f64).powf(-1.1)
    }

    /// True when δ is not below `1/n`, which leaves room for releasing a record outright.
    pub fn delta_too_large_for(&self, n: usize) -> bool {
        self.delta >= 1.0 / n as f64
    }
}

/// Rényi divergence of order `order` for the unit-sensitivity Gaussian: `λ/(2σ²)`.
pub fn gaussian_rdp(sigma: f64, order: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(DpwError::param(format!("sigma must be > 0, got {sigma}")));
    }
    if !(order > 1.0) {
        return Err(DpwError::param(format!("order must be > 1, got {order}")));
    }
    Ok(order / (2.0 * sigma * sigma))
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Per-step RDP of the Poisson-subsampled Gaussian at an integer order ≥ 2.
pub fn subsampled_gaussian_rdp(q: f64, sigma: f64, order: u32) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(DpwError::param(format!("sampling ratio must be in [0, 1], got {q}")));
    }
    if !(sigma > 0.0) {
        return Err(DpwError::param(format!("sigma must be > 0, got {sigma}")));
    }
    if order < 2 {
        return Err(DpwError::param(format!("order must be an integer >= 2, got {order}")));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    let lambda = f64::from(order);
    if q == 1.0 {
        return gaussian_rdp(sigma, lambda);
    }

    let (log_q, log_1mq) = (q.ln(), (-q).ln_1p());
    let inv_2s2 = 1.0 / (2.0 * sigma * sigma);
    let mut log_binom = 0.0; // ln C(order, 0)
    let mut acc = f64::NEG_INFINITY;
    for k in 0..=order {
        if k > 0 {
            log_binom += f64::from(order - k + 1).ln() - f64::from(k).ln();
        }
        let kf = f64::from(k);
        let term = log_binom + (lambda - kf) * log_1mq + kf * log_q + (kf * kf - kf) * inv_2s2;
        acc = log_add(acc, term);
    }
    Ok((acc / (lambda - 1.0)).max(0.0))
}

/// ε at `delta` from accumulated RDP values, with the minimizing order.
pub fn eps_from_rdp(orders: &[u32], rdp: &[f64], delta: f64) -> Result<(f64, u32)> {
    if orders.is_empty() || orders.len() != rdp.len() {
        return Err(DpwError::param("order grid is empty or does not match rdp values"));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(DpwError::param(format!("delta must be in (0, 1], got {delta}")));
    }
    let log_inv_delta = -delta.ln();
    let mut best = (f64::INFINITY, orders[0]);
    for (&order, &r) in orders.iter().zip(rdp) {
        let eps = r + log_inv_delta / (f64::from(order) - 1.0);
        if eps < best.0 {
            best = (eps, order);
        }
    }
    Ok(best)
}

/// RDP bookkeeping for one subsampled Gaussian mechanism stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountantState {
    orders: Vec<u32>,
    rdp: Vec<f64>,
    per_step: Vec<f64>,
    steps: u64,
    q: f64,
    sigma: f64,
}

impl AccountantState {
    /// Fresh state on the default order grid. `sigma == 0` is accepted and
    /// means the mechanism adds no noise (infinite privacy loss once charged).
    pub fn new(q: f64, sigma: f64) -> Result<Self> {
        Self::with_orders(q, sigma, default_orders())
    }

    pub fn with_orders(q: f64, sigma: f64, mut orders: Vec<u32>) -> Result<Self> {
        if orders.is_empty() {
            return Err(DpwError::param("order grid must not be empty"));
        }
        orders.sort_unstable();
        orders.dedup();
        if !(0.0..=1.0).contains(&q) {
            return Err(DpwError::param(format!("sampling ratio must be in [0, 1], got {q}")));
        }
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(DpwError::param(format!("sigma must be >= 0, got {sigma}")));
        }
        let per_step = orders
            .iter()
            .map(|&o| {
                if q == 0.0 {
                    Ok(0.0)
                } else if sigma == 0.0 {
                    Ok(f64::INFINITY)
                } else {
                    subsampled_gaussian_rdp(q, sigma, o)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            rdp: vec![0.0; orders.len()],
            orders,
            per_step,
            steps: 0,
            q,
            sigma,
        })
    }

    pub fn orders(&self) -> &[u32] {
        &self.orders
    }

    pub fn rdp(&self) -> &[f64] {
        &self.rdp
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Adds `steps` more charges of this mechanism.
    pub fn compose(&self, steps: u64) -> Self {
        let mut next = self.clone();
        next.compose_in_place(steps);
        next
    }

    pub fn compose_in_place(&mut self, steps: u64) {
        if steps == 0 {
            return;
        }
        // multiply rather than add repeatedly so compose(a)+compose(b) == compose(a+b)
        self.steps += steps;
        for (r, &s) in self.rdp.iter_mut().zip(&self.per_step) {
            *r = if s == 0.0 { 0.0 } else { self.steps as f64 * s };
        }
    }

    pub fn eps_at_delta(&self, delta: f64) -> Result<(f64, u32)> {
        eps_from_rdp(&self.orders, &self.rdp, delta)
    }
}

/// Several mechanism streams composed in one privacy ledger.
///
/// DPSGD uses stream 0 for gradient releases and, with adaptive clipping,
/// stream 1 for the noisy norm queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    streams: Vec<AccountantState>,
}

impl PrivacyLedger {
    pub fn new(streams: Vec<AccountantState>) -> Result<Self> {
        let Some(first) = streams.first() else {
            return Err(DpwError::param("ledger needs at least one stream"));
        };
        if streams.iter().any(|s| s.orders != first.orders) {
            return Err(DpwError::param("all streams must share one order grid"));
        }
        Ok(Self { streams })
    }

    pub fn single(state: AccountantState) -> Self {
        Self { streams: vec![state] }
    }

    pub fn streams(&self) -> &[AccountantState] {
        &self.streams
    }

    pub fn stream(&self, i: usize) -> &AccountantState {
        &self.streams[i]
    }

    pub fn charge(&mut self, stream: usize, steps: u64) {
        self.streams[stream].compose_in_place(steps);
    }

    /// Total RDP per order across all streams.
    pub fn total_rdp(&self) -> Vec<f64> {
        let mut total = vec![0.0; self.streams[0].orders.len()];
        for s in &self.streams {
            for (t, r) in total.iter_mut().zip(&s.rdp) {
                *t += r;
            }
        }
        total
    }

    pub fn eps_at_delta(&self, delta: f64) -> Result<(f64, u32)> {
        eps_from_rdp(&self.streams[0].orders, &self.total_rdp(), delta)
    }

    /// ε after charging one more step on each stream in `streams`.
    pub fn eps_if_charged(&self, streams: &[usize], delta: f64) -> Result<f64> {
        let mut next = self.clone();
        for &s in streams {
            next.charge(s, 1);
        }
        Ok(next.eps_at_delta(delta)?.0)
    }
}

/// Smallest σ in `bracket` with `eps_of(σ) <= target`, by bisection on a
/// function that is nonincreasing in σ.
pub fn calibrate_with<F>(target: f64, bracket: (f64, f64), tolerance: f64, eps_of: F) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    let (mut lo, mut hi) = bracket;
    let eps_lo = eps_of(lo)?;
    let eps_hi = eps_of(hi)?;
    let failed = || DpwError::CalibrationFailed {
        target,
        low: bracket.0,
        high: bracket.1,
        eps_at_low: eps_lo,
        eps_at_high: eps_hi,
    };
    // Budget must bind inside the bracket: unreachable at the top, slack at the bottom.
    if eps_hi > target || eps_lo <= target {
        return Err(failed());
    }
    // Bisect well below the required tolerance so the returned σ is tight
    // enough for ε to land within a few hundredths of the target.
    let tol = tolerance.min(1e-7);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if eps_of(mid)? <= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Minimal noise multiplier spending at most `budget.epsilon` over `steps`
/// charges at sampling ratio `q`.
pub fn calibrate_sigma(budget: &PrivacyBudget, q: f64, steps: u64) -> Result<f64> {
    budget.validate()?;
    if !(q > 0.0 && q <= 1.0) {
        return Err(DpwError::param(format!("sampling ratio must be in (0, 1], got {q}")));
    }
    if steps == 0 {
        return Err(DpwError::param("steps must be >= 1"));
    }
    calibrate_with(budget.epsilon, SIGMA_BRACKET, SIGMA_TOLERANCE, |sigma| {
        Ok(AccountantState::new(q, sigma)?
            .compose(steps)
            .eps_at_delta(budget.delta)?
            .0)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseCurveRow {
    pub batch_size: usize,
    pub sigma_min: f64,
    /// `sigma_min / batch_size`: noise std per aggregated example at unit clipping bound.
    pub noise_per_example: f64,
    pub eps_achieved: f64,
}

pub const NOISE_CURVE_HEADER: &str = "batch_size,sigma_min,noise_per_example,eps_achieved";

/// One calibration per batch size, rows sorted by batch size.
pub fn noise_per_example_table(
    budget: &PrivacyBudget,
    dataset_size: usize,
    epochs: u64,
    batch_sizes: &[usize],
) -> Vec<Result<NoiseCurveRow>> {
    let mut sizes = batch_sizes.to_vec();
    sizes.sort_unstable();
    sizes.dedup();
    par::map_slice(&sizes, |&b| noise_curve_row(budget, dataset_size, epochs, b))
}

fn noise_curve_row(budget: &PrivacyBudget, n: usize, epochs: u64, batch: usize) -> Result<NoiseCurveRow> {
    if batch == 0 || batch > n {
        return Err(DpwError::param(format!("batch size {batch} must be in 1..={n}")));
    }
    let q = batch as f64 / n as f64;
    let steps = (n / batch) as u64 * epochs;
    let sigma = calibrate_sigma(budget, q, steps)?;
    let eps = AccountantState::new(q, sigma)?.compose(steps).eps_at_delta(budget.delta)?.0;
    Ok(NoiseCurveRow {
        batch_size: batch,
        sigma_min: sigma,
        noise_per_example: sigma / batch as f64,
        eps_achieved: eps,
    })
}

pub fn write_noise_curve_csv<W: Write>(mut w: W, rows: &[NoiseCurveRow]) -> Result<()> {
    writeln!(w, "{NOISE_CURVE_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{}",
            r.batch_size, r.sigma_min, r.noise_per_example, r.eps_achieved
        )?;
    }
    Ok(())
}
