mod common;

use common::*;

#[test]
fn lml_and_posterior_match_dense_inverse() {
    let err = dense_oracle_error(25, 11);
    assert!(err < 1e-8, "max relative error {err:e}");
}

#[test]
fn rbf_square_halves_squared_lengthscale() {
    assert!(rbf_square_identity_error(3) < 1e-12);
}

#[test]
fn corrected_two_factor_median_on_target() {
    let ratio = corrected_prior_median_ratio(20_000, 5);
    assert!((ratio - 1.0).abs() < 0.05, "median ratio {ratio}");
}

#[test]
fn mixture_moments_match_quadrature() {
    let (err, exact) = mixture_oracle_error(10, 8);
    assert!(err < 1e-10, "{err:e}");
    assert!(exact);
}

#[test]
fn quadrature_oracle_on_known_mixture() {
    // equal weights, equal variances: variance = v + spread²
    let (m, v) = brute_force_mixture_moments(&[-1.0, 1.0], &[0.25, 0.25], &[0.5, 0.5]);
    assert!(m.abs() < 1e-12);
    assert!((v - 1.25).abs() < 1e-11);
}
