mod common;

use dadapt::eval::{miou_cls, ConfusionCounts};
use proptest::prelude::*;

#[test]
fn ap_matches_precision_staircase_oracle() {
    let err = common::ap_oracle_max_error(100);
    assert!(err < 1e-6, "max error {err}");
}

#[test]
fn miou_cls_fixtures() {
    let c = ConfusionCounts::from_matrix(vec![vec![3, 1], vec![2, 4]]);
    assert!((miou_cls(&c) - 0.5357).abs() < 1e-4);
    assert_eq!(miou_cls(&ConfusionCounts::from_matrix(vec![vec![4, 0], vec![0, 9]])), 1.0);
    assert_eq!(miou_cls(&ConfusionCounts::from_matrix(vec![vec![0, 3], vec![5, 0]])), 0.0);
    let three = ConfusionCounts::from_matrix(vec![vec![2, 0, 0], vec![0, 0, 0], vec![0, 0, 2]]);
    assert!((miou_cls(&three) - 2.0 / 3.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn ap_is_in_unit_interval(flags in prop::collection::vec(any::<bool>(), 0..30), extra in 0usize..5) {
        let hits = flags.iter().filter(|f| **f).count();
        let v = dadapt::eval::ap_from_flags(&flags, hits + extra);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
        if extra == 0 && hits > 0 && flags.iter().take(hits).all(|f| *f) {
            prop_assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn miou_cls_is_one_on_diagonal(diag in prop::collection::vec(1u64..50, 1..6)) {
        let k = diag.len();
        let n: Vec<Vec<u64>> = (0..k).map(|i| (0..k).map(|j| if i == j { diag[i] } else { 0 }).collect()).collect();
        prop_assert_eq!(miou_cls(&ConfusionCounts::from_matrix(n)), 1.0);
    }
}
