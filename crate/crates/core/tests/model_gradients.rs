mod support;

use epiguide::losses::LossVariant;
use epiguide::model::ModelConfig;
use support::{model_fd_error, small_config};

#[test]
fn full_model_matches_finite_differences_epi() {
    let err = model_fd_error(&small_config(LossVariant::Epi), true, false);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn full_model_matches_finite_differences_max_epi() {
    let err = model_fd_error(&small_config(LossVariant::MaxEpi), true, false);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn full_model_matches_finite_differences_non_match() {
    let err = model_fd_error(&small_config(LossVariant::Epi), false, false);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn full_model_matches_finite_differences_with_epe() {
    let config = ModelConfig { epe_enabled: true, ..small_config(LossVariant::Epi) };
    let err = model_fd_error(&config, true, true);
    assert!(err < 1e-4, "max relative error {err}");
}
