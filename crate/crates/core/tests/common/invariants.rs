//! Mechanism invariants as runnable checks, shared by the `mechanisms` tests
//! and the acceptance suite.

#![allow(dead_code)]

use dpw_core::accountant::AccountantState;
use dpw_core::data::{Dataset, UserDataset};
use dpw_core::dp::{
    advance_clip_state, clip_per_example, dpsgd_step, private_mean_norms, ClipState, Clipping,
    NoiseConfig, NoiseStreams, StepConfig, GRADIENT_STREAM, NORM_STREAM,
};
use dpw_core::federated::{aggregate, clipped_deltas, run_round, FedConfig, FedStreams};
use dpw_core::nn::{self, ModelParams, ModelSpec, PerExampleGrads};
use dpw_core::{rng, Tensor};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::Rng as _;

pub type Check = Result<(), String>;

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config { cases, failure_persistence: None, ..Config::default() },
        proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha),
    )
}

fn run<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Check {
    runner(cases).run(&strategy, test).map_err(|e| e.to_string())
}

fn grads_strategy() -> impl Strategy<Value = (PerExampleGrads, Vec<f64>)> {
    (1usize..6, prop::collection::vec(1usize..8, 1..5)).prop_flat_map(|(batch, lens)| {
        let data = lens
            .iter()
            .map(|&l| prop::collection::vec(-50.0f64..50.0, batch * l))
            .collect::<Vec<_>>();
        let bounds = prop::collection::vec(0.01f64..20.0, lens.len());
        (Just(batch), Just(lens), data, bounds).prop_map(|(batch, lens, data, bounds)| {
            let shapes = lens.iter().map(|&l| vec![l]).collect();
            (PerExampleGrads::from_groups(batch, shapes, data).unwrap(), bounds)
        })
    })
}

pub fn clipped_norms_respect_bounds(cases: u32) -> Check {
    run(cases, grads_strategy(), |(g, bounds)| {
        let (c, norms) = clip_per_example(&g, &bounds).unwrap();
        for i in 0..g.batch_size() {
            for (k, &b) in bounds.iter().enumerate() {
                prop_assert!(c.norm(i, k) <= b + 1e-9);
                prop_assert!(norms[i][k] <= b + 1e-9);
            }
        }
        Ok(())
    })
}

pub fn clipping_keeps_direction(cases: u32) -> Check {
    run(cases, grads_strategy(), |(g, bounds)| {
        let (c, _) = clip_per_example(&g, &bounds).unwrap();
        for i in 0..g.batch_size() {
            for k in 0..bounds.len() {
                let (orig, clip) = (g.example(i, k), c.example(i, k));
                let n = g.norm(i, k);
                if n == 0.0 {
                    prop_assert!(clip.iter().all(|&v| v == 0.0));
                    continue;
                }
                let s = c.norm(i, k) / n;
                prop_assert!((0.0..=1.0 + 1e-12).contains(&s));
                for (a, b) in clip.iter().zip(orig) {
                    prop_assert!((a - s * b).abs() <= 1e-9 * (1.0 + b.abs()));
                }
            }
        }
        Ok(())
    })
}

pub fn clipping_is_idempotent(cases: u32) -> Check {
    run(cases, grads_strategy(), |(g, bounds)| {
        let (once, _) = clip_per_example(&g, &bounds).unwrap();
        let (twice, _) = clip_per_example(&once, &bounds).unwrap();
        for i in 0..g.batch_size() {
            for k in 0..bounds.len() {
                for (a, b) in once.example(i, k).iter().zip(twice.example(i, k)) {
                    prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
                }
            }
        }
        Ok(())
    })
}

pub fn bounds_never_below_floor(cases: u32) -> Check {
    let strategy = (
        prop::collection::vec(1e-7f64..5.0, 1..6),
        prop::collection::vec(-10.0f64..10.0, 6),
        0.01f64..3.0,
        0.01f64..4.0,
        1e-6f64..0.5,
        1usize..6,
    );
    run(cases, strategy, |(start, means, alpha, beta, floor, rounds)| {
        let m = start.len();
        let mut state = ClipState::new(start.clone(), start, alpha, beta, floor).unwrap();
        for _ in 0..rounds {
            state = advance_clip_state(&state, &means[..m]).unwrap();
            prop_assert!(state.bounds().iter().all(|&b| b >= floor));
            prop_assert!(state.norm_bounds().iter().all(|&b| b >= floor));
        }
        Ok(())
    })
}

pub fn adaptive_noiseless_fixed_point(cases: u32) -> Check {
    let strategy = (0.01f64..5.0, 0.5f64..2.0, 0.0f64..2.0, 1usize..5, 1usize..20, 2usize..8);
    run(cases, strategy, |(n, alpha, beta_extra, groups, batch, rounds)| {
        // Start at the fixed point C = α·n; α·β > 1 keeps C_ℓ2 = β·C above n.
        let beta = 1.0 / alpha + 0.01 + beta_extra;
        let mut state = ClipState::new(vec![alpha * n; groups], vec![n * 1.5; groups], alpha, beta, 1e-6).unwrap();
        let norms = vec![vec![n; groups]; batch];
        let mut r = rng::stream(0, "unused");
        for t in 0..rounds {
            let means = private_mean_norms(&norms, &state, 0.0, batch, &mut r).unwrap();
            state = advance_clip_state(&state, &means).unwrap();
            prop_assert!(state.norm_bounds().iter().all(|&c| c > n), "round {}", t);
            for &b in state.bounds() {
                prop_assert!((b - alpha * n).abs() <= 1e-12 * alpha * n);
            }
        }
        Ok(())
    })
}

fn small_model(seed: u64) -> ModelParams {
    nn::init_params(&ModelSpec::new(vec![5, 7, 3], seed)).unwrap()
}

fn batch(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut r = rng::stream(seed, "batch");
    let x = (0..n * 5).map(|_| r.random::<f64>()).collect();
    let y = (0..n).map(|_| r.random_range(0..3)).collect();
    (Tensor::matrix(n, 5, x).unwrap(), y)
}

fn step_cfg(sigma: f64, sigma_l2: f64, lot: usize) -> StepConfig {
    StepConfig {
        lr: 0.1,
        momentum: 0.5,
        lot_size: lot,
        sampling_rate: 0.25,
        noise: NoiseConfig { sigma, sigma_l2, seed: 3 },
        strict_accounting: false,
    }
}

/// σ = 0 with every norm under its bound gives the non-private step, up to
/// summation order.
pub fn sigma_zero_step_is_plain_sgd(cases: u32) -> Check {
    run(cases, (0u64..10_000, 1usize..10), |(seed, n)| {
        let params = small_model(seed);
        let (x, y) = batch(n, seed);
        let cfg = step_cfg(0.0, 0.0, n);
        let velocity = params.zero_velocity();
        let clipping = Clipping::fixed(1e9, params.group_count());
        let ledger = cfg.new_ledger(false, params.group_count()).unwrap();
        let out = dpsgd_step(&params, &velocity, &x, &y, &cfg, &clipping, &ledger, &mut NoiseStreams::new(1)).unwrap();
        let (_, grad) = nn::loss_and_grad(&params, &x, &y).unwrap();
        let (p, v) = nn::apply_update(&params, &grad, cfg.lr, cfg.momentum, &velocity).unwrap();
        let close = |a: Vec<f64>, b: Vec<f64>| {
            a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-12 * (1.0 + y.abs()))
        };
        prop_assert!(close(out.params.params().flatten(), p.params().flatten()));
        prop_assert!(close(out.velocity.flatten(), v.flatten()));
        Ok(())
    })
}

/// One charge per step in fixed mode; one per stream and step in adaptive mode.
pub fn charge_counts(cases: u32) -> Check {
    run(cases, (any::<bool>(), 1u64..20, 0u64..1000), |(adaptive, steps, seed)| {
        let params = small_model(seed);
        let m = params.group_count();
        let cfg = step_cfg(1.0, 2.0, 4);
        let mut ledger = cfg.new_ledger(adaptive, m).unwrap();
        let mut clipping = if adaptive {
            Clipping::Adaptive(ClipState::new(vec![1.0; m], vec![1.0; m], 1.0, 2.0, 1e-6).unwrap())
        } else {
            Clipping::fixed(1.0, m)
        };
        let mut p = params.clone();
        let mut v = p.zero_velocity();
        let mut noise = NoiseStreams::new(seed);
        for s in 0..steps {
            // every third batch is empty
            let (x, y) = if s % 3 == 0 { (Tensor::zeros(vec![0, 5]), vec![]) } else { batch(4, s + seed) };
            let out = dpsgd_step(&p, &v, &x, &y, &cfg, &clipping, &ledger, &mut noise).unwrap();
            (p, v, clipping, ledger) = (out.params, out.velocity, out.clipping, out.ledger);
        }
        prop_assert_eq!(ledger.stream(GRADIENT_STREAM).steps(), steps);
        prop_assert_eq!(ledger.streams().len(), if adaptive { 2 } else { 1 });
        if adaptive {
            prop_assert_eq!(ledger.stream(NORM_STREAM).steps(), steps);
        }
        Ok(())
    })
}

fn users(u: usize, r: usize, seed: u64) -> UserDataset {
    let mut g = rng::stream(seed, "fed-users");
    let n = u * r;
    let x = (0..n * 5).map(|_| g.random::<f64>()).collect();
    let y = (0..n).map(|_| g.random_range(0..3)).collect();
    let data = Dataset::new(1, 5, 3, Tensor::matrix(n, 5, x).unwrap(), y).unwrap();
    UserDataset::new(data, u, r).unwrap()
}

fn fed_cfg(q: f64, clip: f64, sigma: f64) -> FedConfig {
    FedConfig {
        user_fraction: q,
        local_steps: 3,
        local_lr: 0.5,
        update_clip: clip,
        sigma,
        rounds: 1,
        seed: 5,
    }
}

/// Recomputes the pre-noise aggregate with one user removed.
pub fn user_sensitivity(cases: u32) -> Check {
    let strategy = (2usize..7, 0.2f64..1.0, 0.01f64..2.0, 0u64..1000, 0usize..100);
    run(cases, strategy, |(u, q, clip, seed, pick)| {
        let ds = users(u, 3, seed);
        let global = small_model(seed);
        let cfg = fed_cfg(q, clip, 0.0);
        let all: Vec<usize> = (0..u).collect();
        let full = aggregate(&global, &clipped_deltas(&global, &ds, &all, &cfg).unwrap(), u, q);

        let neighbor = ds.without_user(pick % u).unwrap();
        let rest: Vec<usize> = (0..u - 1).collect();
        let reduced = aggregate(&global, &clipped_deltas(&global, &neighbor, &rest, &cfg).unwrap(), u, q);

        let mut diff = full.clone();
        diff.add_scaled(&reduced, -1.0);
        prop_assert!(diff.norm() <= clip / (q * u as f64) + 1e-9);
        Ok(())
    })
}

/// σ = 0 and C_u = ∞ reduce a round to plain FedAvg over the sampled users.
pub fn noiseless_round_is_fedavg(cases: u32) -> Check {
    run(cases, (1usize..7, 0.3f64..1.0, 0u64..1000), |(u, q, seed)| {
        let ds = users(u, 4, seed);
        let global = small_model(seed + 1);
        let cfg = fed_cfg(q, f64::INFINITY, 0.0);
        let acct = AccountantState::new(q, 0.0).unwrap();
        let out = run_round(&global, &ds, &cfg, &acct, &mut FedStreams::new(seed)).unwrap();

        let mut expect = global.params().clone();
        let denom = q * u as f64;
        for &user in &out.sampled {
            let (x, y) = ds.user_records(user);
            let mut local = global.clone();
            let mut v = local.zero_velocity();
            for _ in 0..cfg.local_steps {
                let (_, g) = nn::loss_and_grad(&local, &x, &y).unwrap();
                (local, v) = nn::apply_update(&local, &g, cfg.local_lr, 0.0, &v).unwrap();
            }
            expect.add_scaled(local.params(), 1.0 / denom);
            expect.add_scaled(global.params(), -1.0 / denom);
        }
        for g in 0..expect.num_groups() {
            for (a, b) in expect.group(g).data().iter().zip(out.params.params().group(g).data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
        Ok(())
    })
}

pub fn rounds_are_deterministic(cases: u32) -> Check {
    run(cases, (0u64..1000, 0.1f64..1.0), |(seed, q)| {
        let ds = users(8, 2, seed);
        let global = small_model(seed);
        let cfg = fed_cfg(q, 0.3, 1.1);
        let acct = AccountantState::new(q, 1.1).unwrap();
        let a = run_round(&global, &ds, &cfg, &acct, &mut FedStreams::new(seed)).unwrap();
        let b = run_round(&global, &ds, &cfg, &acct, &mut FedStreams::new(seed)).unwrap();
        prop_assert_eq!(a.params, b.params);
        prop_assert_eq!(a.sampled, b.sampled);
        Ok(())
    })
}

/// Every mechanism invariant with its name.
pub fn all(cases: u32) -> Vec<(&'static str, Check)> {
    vec![
        ("clip norm bound", clipped_norms_respect_bounds(cases)),
        ("clip direction", clipping_keeps_direction(cases)),
        ("clip idempotence", clipping_is_idempotent(cases)),
        ("bounds >= floor", bounds_never_below_floor(cases)),
        ("adaptive fixed point", adaptive_noiseless_fixed_point(cases)),
        ("sigma=0 step", sigma_zero_step_is_plain_sgd(cases)),
        ("charge counts", charge_counts(cases)),
        ("user sensitivity", user_sensitivity(cases / 4 + 1)),
        ("sigma=0 round is FedAvg", noiseless_round_is_fedavg(cases / 4 + 1)),
        ("round determinism", rounds_are_deterministic(cases / 4 + 1)),
    ]
}
