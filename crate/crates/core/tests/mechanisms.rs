mod common;

use common::invariants as inv;

const CASES: u32 = 200;

fn ok(check: inv::Check) {
    if let Err(e) = check {
        panic!("{e}");
    }
}

#[test]
fn clipped_norms_respect_bounds() {
    ok(inv::clipped_norms_respect_bounds(CASES));
}

#[test]
fn clipping_keeps_direction() {
    ok(inv::clipping_keeps_direction(CASES));
}

#[test]
fn clipping_is_idempotent() {
    ok(inv::clipping_is_idempotent(CASES));
}

#[test]
fn bounds_never_below_floor() {
    ok(inv::bounds_never_below_floor(CASES));
}

#[test]
fn adaptive_noiseless_fixed_point() {
    ok(inv::adaptive_noiseless_fixed_point(CASES));
}

#[test]
fn sigma_zero_step_is_plain_sgd() {
    ok(inv::sigma_zero_step_is_plain_sgd(CASES));
}

#[test]
fn charge_counts() {
    ok(inv::charge_counts(64));
}

#[test]
fn user_sensitivity() {
    ok(inv::user_sensitivity(64));
}

#[test]
fn noiseless_round_is_fedavg() {
    ok(inv::noiseless_round_is_fedavg(64));
}

#[test]
fn rounds_are_deterministic() {
    ok(inv::rounds_are_deterministic(32));
}
