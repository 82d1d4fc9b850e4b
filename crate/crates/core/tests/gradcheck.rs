mod common;

use common::{full_model_error, pixel_decoder_error, se_reduction_error, TOL};

#[test]
fn se_channel_reduction_gradients() {
    let err = se_reduction_error();
    assert!(err <= TOL, "worst relative error {err}");
}

#[test]
fn pixel_decoder_gradients() {
    let err = pixel_decoder_error();
    assert!(err <= TOL, "worst relative error {err}");
}

#[test]
fn full_model_with_matching_loss_gradients() {
    let err = full_model_error();
    assert!(err <= TOL, "worst relative error {err}");
}
