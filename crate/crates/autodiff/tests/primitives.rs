use fas_autodiff::suite::{check_all_primitives, check_primitive, PRIMITIVES};

#[test]
fn every_primitive_matches_central_differences() {
    for seed in [1u64, 2, 3] {
        for report in check_all_primitives(seed).unwrap() {
            assert!(
                report.passed(),
                "{} (seed {seed}): max relative error {:.3e}",
                report.name,
                report.max_rel_error
            );
        }
    }
}

#[test]
fn unknown_primitive_is_rejected() {
    assert!(check_primitive("frobnicate", 0).is_err());
    assert!(PRIMITIVES.contains(&"hermitian_pd_inverse"));
}

#[test]
fn reports_are_nontrivial() {
    for report in check_all_primitives(7).unwrap() {
        let max_grad = report
            .entries
            .iter()
            .map(|e| e.analytic.abs())
            .fold(0.0, f64::max);
        eprintln!(
            "{:<22} max_rel={:.2e} max|g|={:.2e} n={}",
            report.name,
            report.max_rel_error,
            max_grad,
            report.entries.len()
        );
        assert!(max_grad > 1e-3, "{} has vanishing gradients", report.name);
    }
}
