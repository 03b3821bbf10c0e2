mod common;

use twinlm::model::AttentionMode;

#[test]
fn every_op_matches_central_differences() {
    for (name, err) in common::op_gradchecks() {
        assert!(err < 1e-5, "{name}: relative error {err:e}");
    }
}

#[test]
fn two_layer_model_matches_central_differences() {
    for mode in [AttentionMode::Bidirectional, AttentionMode::Causal] {
        let err = common::model_gradcheck(mode);
        assert!(err < 1e-5, "{mode:?}: relative error {err:e}");
    }
}
