//! Each architectural addition collapses exactly to the component it extends.

use stratlab::diagnostics::reduction_checks;

#[test]
fn reductions_hold_for_several_seeds() {
    for seed in 0..5 {
        for r in reduction_checks(seed).unwrap() {
            assert!(r.passes(), "seed {seed}: {} deviates by {:e}", r.name, r.max_abs_diff);
        }
    }
}
