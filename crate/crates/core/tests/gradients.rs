mod common;

use common::*;

#[test]
fn every_tape_op_matches_finite_differences() {
    for (op, err) in op_gradient_errors(1) {
        assert!(err < 1e-5, "{op}: {err:e}");
    }
}

#[test]
fn tiny_captioner_loss_gradient() {
    let (err, checked) = tiny_model_gradient_error(2);
    assert!(checked > 500);
    assert!(err < 1e-5, "{err:e}");
}

#[test]
fn lml_gradient_every_token() {
    let vocab = full_vocabulary();
    let errs = lml_gradient_errors(&vocab, 2, 3);
    assert_eq!(errs.len(), vocab.num_kernels());
    for (token, err) in errs {
        assert!(err < 1e-4, "{token}: {err:e}");
    }
}
