mod common;

use dpw_core::dp::{clip_per_example, noisy_aggregate, private_gradient};
use dpw_core::nn;
use dpw_core::rng;
use rand::Rng as _;

#[test]
fn per_example_gradients_match_finite_differences() {
    let worst = common::worst_fd_error(100);
    assert!(worst < 1e-5, "worst relative error {worst}");
}

#[test]
fn mean_of_per_example_is_batch_gradient() {
    let worst = common::worst_linearity_error(50);
    assert!(worst < 1e-8, "worst relative gap {worst}");
}

#[test]
fn forward_leaves_params_untouched() {
    let mut rng = common::test_rng("purity");
    let params = common::random_model(&mut rng);
    let before = params.clone();
    let (x, _) = common::random_batch(&params, 5, &mut rng);
    let a = nn::forward(&params, &x).unwrap();
    let b = nn::forward(&params, &x).unwrap();
    assert_eq!(params, before);
    assert_eq!(a, b);
}

#[test]
fn fused_path_matches_materialized_route() {
    let mut rng = common::test_rng("fused");
    for trial in 0..30u64 {
        let params = common::random_model(&mut rng);
        let (x, y) = common::random_batch(&params, rng.random_range(1..=12), &mut rng);
        let bounds: Vec<f64> = (0..params.group_count()).map(|_| rng.random_range(0.05..3.0)).collect();
        let sigma = if trial % 3 == 0 { 0.0 } else { 1.3 };
        let lot = 7;

        let mut r1 = rng::stream(trial, "agg");
        let (fast, norms, _) = private_gradient(&params, &x, &y, &bounds, sigma, lot, &mut r1).unwrap();

        let mut r2 = rng::stream(trial, "agg");
        let (_, per) = nn::loss_and_per_example_grads(&params, &x, &y).unwrap();
        let (clipped, clipped_norms) = clip_per_example(&per, &bounds).unwrap();
        let slow = noisy_aggregate(&clipped, &bounds, sigma, lot, &mut r2).unwrap();

        for g in 0..fast.num_groups() {
            for (a, b) in fast.group(g).data().iter().zip(slow.group(g).data()) {
                assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()), "group {g}: {a} vs {b}");
            }
        }
        for (raw, cl) in norms.iter().zip(&clipped_norms) {
            for g in 0..bounds.len() {
                assert!((raw[g].min(bounds[g]) - cl[g]).abs() <= 1e-10 * (1.0 + cl[g]));
            }
        }
    }
}
