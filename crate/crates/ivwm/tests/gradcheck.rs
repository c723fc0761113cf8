//! Finite-difference gradient checks for every differentiable op.

mod common;

#[test]
fn every_op_matches_central_differences() {
    let results = common::gradient_check_suite(20);
    assert!(results.len() >= 25, "expected the full op roster");
    let mut failures = Vec::new();
    for (name, err) in &results {
        if *err >= 1e-5 {
            failures.push(format!("{name}: rel err {err:.3e}"));
        }
    }
    assert!(failures.is_empty(), "gradient checks failed:\n{}", failures.join("\n"));
}
