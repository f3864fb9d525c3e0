mod common;

use common::grad_suite::{self, TOLERANCE};

#[test]
fn every_op_kernel_block_and_model_matches_finite_differences() {
    let outcomes = grad_suite::run(&[0, 1, 2]).unwrap();
    let mut failures = Vec::new();
    for o in &outcomes {
        if !(o.report.max_rel_err < TOLERANCE) {
            failures.push(format!(
                "{} seed {}: rel err {:.3e} at input {} entry {} (analytic {:.6e}, numeric {:.6e})",
                o.name, o.seed, o.report.max_rel_err, o.report.worst.0, o.report.worst.1, o.report.analytic, o.report.numeric
            ));
        }
    }
    let worst = outcomes.iter().map(|o| o.report.max_rel_err).fold(0.0, f64::max);
    println!("{} checks, worst rel err {worst:.3e}", outcomes.len());
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}

