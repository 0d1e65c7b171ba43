use attnet::certify::{attention_suite, fault_detection, layer_suite, model_suite, CaseResult, Fault};

fn assert_all_pass(results: &[CaseResult]) {
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.report.passed)
        .map(|r| format!("{}: {}", r.name, r.report))
        .collect();
    assert!(failed.is_empty(), "{failed:#?}");
}

#[test]
fn layers_match_finite_differences() {
    let results = layer_suite(0, Fault::default());
    assert_all_pass(&results);
    for r in &results {
        assert!(r.report.max_rel_err <= r.report.tol);
        assert!(r.report.n_checked > 0, "{}", r.name);
    }
}

#[test]
fn attention_matches_finite_differences() {
    assert_all_pass(&attention_suite(0, Fault::default()));
}

#[test]
fn models_match_finite_differences() {
    assert_all_pass(&model_suite(0, Fault::default()));
}

#[test]
fn suites_pass_from_another_seed() {
    assert_all_pass(&layer_suite(7, Fault::default()));
    assert_all_pass(&attention_suite(7, Fault::default()));
}

#[test]
fn injected_fault_is_caught() {
    let r = fault_detection(0);
    assert!(!r.report.passed);
    // a 1% scale error shows up as a relative error of about 1e-2
    assert!((r.report.max_rel_err - 0.01 / 1.01).abs() < 1e-3, "{}", r.report);
    let faulty = layer_suite(0, Fault(Some(1.01)));
    let caught = faulty.iter().filter(|r| !r.report.passed).count();
    // flatten and pooling have no parameters but still scale the input gradient
    assert_eq!(caught, faulty.len());
}

#[test]
fn suites_are_deterministic() {
    let a: Vec<String> = attention_suite(3, Fault::default()).iter().map(|r| r.report.to_string()).collect();
    let b: Vec<String> = attention_suite(3, Fault::default()).iter().map(|r| r.report.to_string()).collect();
    assert_eq!(a, b);
}
