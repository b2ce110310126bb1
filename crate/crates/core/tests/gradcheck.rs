use tabdeco_core::autodiff::OP_NAMES;
use tabdeco_core::gradcheck::{run_suite, CheckKind};

#[test]
fn full_suite_passes() {
    let checks = run_suite(None).unwrap();
    for c in &checks {
        println!("{:<24} {:.3e} (tol {:.0e})", c.name, c.report.max_rel_err, c.report.tol);
    }
    let count = |k| checks.iter().filter(|c| c.kind == k).count();
    assert_eq!(count(CheckKind::Op), OP_NAMES.len());
    assert_eq!(count(CheckKind::Scheme), 6);
    assert_eq!(count(CheckKind::Model), 3);
    let failed: Vec<_> = checks.iter().filter(|c| !c.report.passed).map(|c| &c.name).collect();
    assert!(failed.is_empty(), "failed: {failed:?}");
}

#[test]
fn injected_fault_fails_suite() {
    let checks = run_suite(Some("layer_norm")).unwrap();
    let failed: Vec<_> = checks
        .iter()
        .filter(|c| !c.report.passed)
        .map(|c| c.name.as_str())
        .collect();
    assert!(failed.contains(&"layer_norm"));
    assert!(failed.contains(&"model_both"));
    assert!(!failed.contains(&"softmax"));
}
