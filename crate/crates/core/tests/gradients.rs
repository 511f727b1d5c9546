mod common;

#[test]
fn every_differentiable_op_matches_finite_differences() {
    let mut failures = Vec::new();
    for r in common::gradient_suite() {
        assert!(r.checked > 0, "{} probed nothing", r.name);
        if r.max_rel >= 1e-3 {
            failures.push(format!("{}: max relative error {:.3e}", r.name, r.max_rel));
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}
