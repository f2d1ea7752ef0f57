mod support;

use support::composed::{clipped_policy_error, value_regression_error};

const TOL: f64 = 1e-4;

#[test]
fn value_regression_loss_matches_finite_differences() {
    let err = value_regression_error();
    assert!(err <= TOL, "max relative error {err:.3e}");
}

#[test]
fn clipped_policy_loss_matches_finite_differences() {
    let err = clipped_policy_error();
    assert!(err <= TOL, "max relative error {err:.3e}");
}
