use l2a::eval::{accuracy, pearson, spearman};
use proptest::prelude::*;

proptest! {
    #[test]
    fn correlations_are_bounded_and_affine_invariant(
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..40),
        scale in 0.1f64..10.0,
        shift in -5.0f64..5.0,
    ) {
        let (p, l): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let r = pearson(&p, &l).unwrap();
        if !r.undefined {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r.value));
            let moved: Vec<f64> = p.iter().map(|x| scale * x + shift).collect();
            let r2 = pearson(&moved, &l).unwrap();
            prop_assert!((r.value - r2.value).abs() < 1e-9);
            let rho = spearman(&moved, &l).unwrap();
            prop_assert!((rho.value - spearman(&p, &l).unwrap().value).abs() < 1e-9);
        }
    }

    #[test]
    fn accuracy_counts_matches(labels in prop::collection::vec(0usize..4, 1..50), shift in 0usize..4) {
        let preds: Vec<usize> = labels.iter().map(|l| (l + shift) % 4).collect();
        let expected = if shift == 0 { 1.0 } else { 0.0 };
        prop_assert_eq!(accuracy(&preds, &labels).unwrap(), expected);
    }
}
