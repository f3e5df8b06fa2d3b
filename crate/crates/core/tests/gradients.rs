//! Gradient suite: every primitive and composite against central finite
//! differences over many seeds, the full tiny model included.

use std::time::Instant;

use equiseg_core::verify::{full_model_check, gradcheck_config, run_grad_suite, GRAD_TOLERANCE};

#[test]
fn grad_suite_passes_within_budget() {
    let start = Instant::now();
    let report = run_grad_suite(20, true).unwrap();
    let elapsed = start.elapsed();
    print!("{}", report.render());
    assert!(report.passed(), "gradient suite failed:\n{}", report.render());
    assert!(
        elapsed.as_secs() < 120,
        "gradient suite took {elapsed:?}, budget is 2 minutes"
    );
}

#[test]
fn end_to_end_parameter_subset_matches_finite_differences() {
    // Random 1% of parameter entries of the tiny model, total loss
    // including the self-guidance term.
    let worst = full_model_check(&gradcheck_config(), 0.01, 5).unwrap();
    assert!(
        worst <= GRAD_TOLERANCE,
        "end-to-end gradient error {worst} above {GRAD_TOLERANCE}"
    );
}

#[test]
fn model_check_with_ablation_switches_still_differentiates() {
    // The mean-hub and no-residual paths change the graph; gradients must
    // stay consistent there too.
    let mut cfg = gradcheck_config();
    cfg.ablation.sq_hub = "mean".into();
    cfg.ablation.residual_add = false;
    let worst = full_model_check(&cfg, 0.01, 6).unwrap();
    assert!(worst <= GRAD_TOLERANCE, "ablated model gradient error {worst}");
}
