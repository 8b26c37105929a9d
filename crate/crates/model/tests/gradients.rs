use odeformer_core::rng::seeded;
use odeformer_model::gradcheck::{fd_error_at, gradient_check, linear_head_check, DEFAULT_STEP};
use odeformer_model::ModelConfig;

#[test]
fn linear_head_is_exact() {
    let err = linear_head_check(6, 5, 4, &mut seeded(1));
    assert!(err < 1e-8, "linear head error {err}");
}

#[test]
fn tiny_model_matches_finite_differences() {
    let r = gradient_check(&ModelConfig::tiny(), DEFAULT_STEP, 6, &mut seeded(2));
    println!("max relative error {:.3e} in {} over {} probes", r.max_relative_error, r.worst_tensor, r.probes);
    assert!(r.max_relative_error < 1e-4);
}

#[test]
fn finite_difference_error_is_second_order() {
    let cfg = ModelConfig::tiny();
    let e1: f64 = fd_error_at(&cfg, 2e-2, &mut seeded(3)).iter().sum();
    let e2: f64 = fd_error_at(&cfg, 1e-2, &mut seeded(3)).iter().sum();
    let ratio = e1 / e2;
    assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
}
