mod support;

use support::grad_ops;

const TOL: f64 = 1e-4;

#[test]
fn every_tape_op_matches_central_differences() {
    let errs = grad_ops::op_errors().unwrap();
    assert!(errs.len() >= 25, "only {} op cases", errs.len());
    let bad: Vec<_> = errs.iter().filter(|(_, e)| !(*e < TOL)).collect();
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn relaxed_superkernel_layer_gradients_include_thresholds() {
    for (name, e) in grad_ops::superkernel_layer_errors().unwrap() {
        assert!(e < TOL, "{name}: {e}");
    }
}

#[test]
fn relaxed_network_runtime_gradient() {
    let e = grad_ops::network_runtime_errors().unwrap();
    assert!(e < TOL, "{e}");
}
