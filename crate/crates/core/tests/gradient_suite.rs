use mmseg_autodiff::GradCheck;
use mmseg_core::gradsuite::{run_composite_suite, COMPOSITES};

#[test]
fn every_composite_passes_finite_differences() {
    let outcomes = run_composite_suite(2, 11, &GradCheck::default()).unwrap();
    assert_eq!(outcomes.len(), COMPOSITES.len());
    for o in &outcomes {
        assert!(o.passed(), "{} failed {} of {} trials (max rel {:e})", o.name, o.failed_trials, o.trials, o.max_rel_error);
        assert!(o.checked > 0, "{} checked nothing", o.name);
    }
}
