mod common;

use std::sync::OnceLock;

use proptest::prelude::*;

use common::Fixture;

fn fixtures() -> &'static [Fixture] {
    static CELL: OnceLock<Vec<Fixture>> = OnceLock::new();
    CELL.get_or_init(common::all_fixtures)
}

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, failure_persistence: None, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(config(12))]

    #[test]
    fn girsanov_weights_are_unbiased(m in 0usize..6, c in 1.0f64..3.0, seed in any::<u64>()) {
        let r = common::girsanov_unbiased(&fixtures()[m], c, 2000, seed);
        prop_assert!(r.is_ok(), "{}", r.unwrap_err());
    }

    #[test]
    fn shift_keeps_gradient(m in 0usize..6, extra in 0.0f64..5.0, t in 0.0f64..1.0, z in prop::collection::vec(-1.5f64..1.5, 32)) {
        let f = &fixtures()[m];
        let x: Vec<f64> = f.x0.iter().zip(&z).map(|(a, b)| a + b).collect();
        let r = common::positivization_invariance(f, extra, t, &x);
        prop_assert!(r.is_ok(), "{}", r.unwrap_err());
    }

    #[test]
    fn indicator_mc_variance(m in 0usize..6, samples in 50usize..400, seed in any::<u64>()) {
        let r = common::indicator_variance_identity(&fixtures()[m], samples, seed);
        prop_assert!(r.is_ok(), "{}", r.unwrap_err());
    }

    #[test]
    fn workers_do_not_change_results(m in 0usize..6, workers in 2usize..5, seed in any::<u64>()) {
        let r = common::worker_determinism(&fixtures()[m], workers, 64, seed);
        prop_assert!(r.is_ok(), "{}", r.unwrap_err());
    }
}

proptest! {
    #![proptest_config(config(6))]

    #[test]
    fn bound_dominates_second_moment(m in 0usize..6, seed in any::<u64>()) {
        let r = common::bound_dominates(&fixtures()[m], 2000, seed);
        prop_assert!(r.is_ok(), "{}", r.unwrap_err());
    }
}

#[test]
fn regression_residual_is_nested() {
    for f in fixtures() {
        common::regression_nesting(f).unwrap();
    }
}
