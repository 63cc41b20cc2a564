//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

pub mod invariants;

use dpw_core::nn::{self, ModelParams, ModelSpec};
use dpw_core::rng::{self, Rng};
use dpw_core::Tensor;
use rand::Rng as _;

/// Composite Simpson rule on `[a, b]` with an even number of panels no wider
/// than `h`, applied to `exp(log_f)` and returned as a natural log.
fn log_simpson(a: f64, b: f64, h: f64, log_f: impl Fn(f64) -> f64) -> f64 {
    let mut n = ((b - a) / h).ceil() as usize;
    n += n % 2;
    let step = (b - a) / n as f64;
    let vals: Vec<f64> = (0..=n).map(|i| log_f(a + step * i as f64)).collect();
    let peak = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut acc = 0.0;
    for (i, v) in vals.iter().enumerate() {
        let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * (v - peak).exp();
    }
    peak + (acc * step / 3.0).ln()
}

fn simpson(a: f64, b: f64, h: f64, f: impl Fn(f64) -> f64) -> f64 {
    let mut n = ((b - a) / h).ceil() as usize;
    n += n % 2;
    let step = (b - a) / n as f64;
    let mut acc = 0.0;
    for i in 0..=n {
        let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + step * i as f64);
    }
    acc * step / 3.0
}

/// `D_α((1−q)N(0,σ²) + qN(1,σ²) ‖ N(0,σ²))` by numerical integration of
/// `E_{z∼N(0,σ²)}[f(z)^α]` with `f(z) = 1 − q + q·exp((2z − 1)/(2σ²))`.
pub fn quadrature_rdp(q: f64, sigma: f64, alpha: u32) -> f64 {
    let a = f64::from(alpha);
    let s2 = sigma * sigma;
    let log_norm = -0.5 * (2.0 * std::f64::consts::PI * s2).ln();
    let lo = -12.0 * sigma;
    let hi = a + 1.0 + 15.0 * sigma;
    let h = sigma / 200.0;
    // log f(z) = ln(1 − q + q e^u)
    let log_f = |z: f64| {
        let u = (2.0 * z - 1.0) / (2.0 * s2);
        if u > 0.0 {
            u + q.ln() + ((1.0 - q) * (-u).exp() / q).ln_1p()
        } else {
            (q * u.exp_m1()).ln_1p()
        }
    };
    let log_a = log_simpson(lo, hi, h, |z| log_norm - z * z / (2.0 * s2) + a * log_f(z));
    let log_a = if log_a > 0.1 {
        log_a
    } else {
        // A − 1 integrated directly so a tiny divergence is not lost to rounding.
        let a_minus_1 = simpson(lo, hi, h, |z| {
            (log_norm - z * z / (2.0 * s2)).exp() * (a * log_f(z)).exp_m1()
        });
        a_minus_1.ln_1p()
    };
    log_a / (a - 1.0)
}

/// Small random MLP for gradient checks.
pub fn random_model(rng: &mut Rng) -> ModelParams {
    let depth = rng.random_range(1..=3);
    let mut widths = vec![rng.random_range(1..=6)];
    for _ in 0..depth {
        widths.push(rng.random_range(2..=6));
    }
    let spec = ModelSpec::new(widths, rng.random());
    let mut params = nn::init_params(&spec).unwrap();
    // Nonzero biases so the bias gradients are exercised too.
    for g in 0..params.group_count() {
        for x in params.params_mut().group_mut(g).data_mut() {
            *x += rng.random_range(-0.5..0.5);
        }
    }
    params
}

pub fn random_batch(params: &ModelParams, n: usize, rng: &mut Rng) -> (Tensor, Vec<usize>) {
    let d = params.input_dim();
    let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y = (0..n).map(|_| rng.random_range(0..params.classes())).collect();
    (Tensor::matrix(n, d, x).unwrap(), y)
}

pub fn test_rng(tag: &str) -> Rng {
    rng::stream(0x5eed, tag)
}

fn loss_of(params: &ModelParams, x: &Tensor, y: &[usize], i: usize) -> f64 {
    nn::losses(params, x, y).unwrap()[i]
}

/// Relative error of the analytic per-example gradient against central
/// differences over every coordinate of one model.
pub fn fd_rel_error(params: &ModelParams, x: &Tensor, y: &[usize], i: usize) -> f64 {
    let (_, per) = nn::loss_and_per_example_grads(params, x, y).unwrap();
    let h = 1e-6;
    let mut diff2 = 0.0;
    let mut ref2 = 0.0;
    let mut probe = params.clone();
    for g in 0..params.group_count() {
        for j in 0..params.params().group(g).len() {
            let orig = params.params().group(g).data()[j];
            probe.params_mut().group_mut(g).data_mut()[j] = orig + h;
            let up = loss_of(&probe, x, y, i);
            probe.params_mut().group_mut(g).data_mut()[j] = orig - h;
            let down = loss_of(&probe, x, y, i);
            probe.params_mut().group_mut(g).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = per.example(i, g)[j];
            diff2 += (numeric - analytic).powi(2);
            ref2 += analytic.powi(2).max(numeric.powi(2));
        }
    }
    diff2.sqrt() / ref2.sqrt().max(1e-12)
}

/// Worst finite-difference error over `trials` random models and batches.
pub fn worst_fd_error(trials: usize) -> f64 {
    let mut rng = test_rng("fd");
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let params = random_model(&mut rng);
        let n = rng.random_range(1..=4);
        let (x, y) = random_batch(&params, n, &mut rng);
        let i = rng.random_range(0..n);
        worst = worst.max(fd_rel_error(&params, &x, &y, i));
    }
    worst
}

/// Worst relative gap between the mean of per-example gradients and the
/// batch gradient over `trials` random models.
pub fn worst_linearity_error(trials: usize) -> f64 {
    let mut rng = test_rng("linearity");
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let params = random_model(&mut rng);
        let (x, y) = random_batch(&params, rng.random_range(1..=9), &mut rng);
        let (_, per) = nn::loss_and_per_example_grads(&params, &x, &y).unwrap();
        let (_, batch) = nn::loss_and_grad(&params, &x, &y).unwrap();
        let mean = per.mean();
        for g in 0..batch.num_groups() {
            let a = mean.group(g).data();
            let b = batch.group(g).data();
            let err: f64 = a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            worst = worst.max(err / dpw_core::tensor::l2_norm(b).max(1e-12));
        }
    }
    worst
}
