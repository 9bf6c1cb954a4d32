use eddyseg_core::gradsuite::{check_op, run_suite, SuiteOptions, OPS};

#[test]
fn every_op_passes_finite_differences() {
    let report = run_suite(&SuiteOptions::default()).unwrap();
    for r in &report.ops {
        println!("{:<18} instances={} checked={:<5} skipped={:<4} max_rel_err={:.3e} tol={:e} {}",
            r.op, r.instances, r.checked, r.skipped, r.max_rel_err, r.tol, if r.pass { "ok" } else { "FAIL" });
        assert!(r.instances >= 5);
    }
    assert!(report.pass);
}

#[test]
fn injected_fault_flags_exactly_that_op() {
    for op in ["conv_transpose2d", "batchnorm2d", "softmax"] {
        let opts = SuiteOptions {
            inject_fault: Some(op.to_string()),
            ..SuiteOptions::default()
        };
        for other in OPS.iter().filter(|&&o| o != "network") {
            let r = check_op(other, &opts).unwrap();
            assert_eq!(r.pass, *other != op, "{other} with fault in {op}: {r:?}");
        }
    }
}
