//! Every differentiable path used in training, verified against central
//! finite differences in f64.

use std::time::Instant;

use adcomm_core::nn::gradcheck::{run_standard_suite, REL_ERR_LIMIT};

#[test]
fn every_backward_path_matches_finite_differences() {
    let start = Instant::now();
    let reports = run_standard_suite();
    assert!(reports.len() >= 10);
    let mut failed = false;
    for r in &reports {
        let ok = r.worst_rel_err < REL_ERR_LIMIT;
        failed |= !ok;
        println!(
            "{:<32} {:>3} entries  worst rel err {:.3e}  {}",
            r.name,
            r.checked,
            r.worst_rel_err,
            if ok { "ok" } else { "FAIL" }
        );
    }
    assert!(!failed, "a backward path disagrees with finite differences");
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 60, "suite took {elapsed:?}, limit is one minute");
}
