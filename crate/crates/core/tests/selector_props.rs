use l2a::selector::{advantages, discounted_returns, select_actions, ActionMode, Baseline};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn returns_satisfy_the_recursion(
        rewards in prop::collection::vec(-1.0f64..1.0, 1..30),
        gamma in 0.0f64..=1.0,
    ) {
        let g = discounted_returns(&rewards, gamma);
        prop_assert_eq!(g.len(), rewards.len());
        let last = rewards.len() - 1;
        prop_assert_eq!(g[last], rewards[last]);
        for t in 0..last {
            prop_assert!((g[t] - (rewards[t] + gamma * g[t + 1])).abs() < 1e-12);
        }
    }

    #[test]
    fn some_sample_is_always_kept(
        probs in prop::collection::vec(0.0f64..=1.0, 1..20),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for mode in [ActionMode::Sample, ActionMode::Threshold] {
            let a = select_actions(&probs, &mut rng, mode);
            prop_assert_eq!(a.mask.len(), probs.len());
            prop_assert!(a.selected() >= 1);
            if a.forced {
                prop_assert_eq!(a.selected(), 1);
            } else if let ActionMode::Threshold = mode {
                for (m, p) in a.mask.iter().zip(&probs) {
                    prop_assert_eq!(*m, *p >= 0.5);
                }
            }
        }
    }

    #[test]
    fn advantages_are_centred(
        returns in prop::collection::vec(-3.0f64..3.0, 1..10),
        b in -2.0f64..2.0,
    ) {
        let baseline = Baseline { value: b, initialized: true };
        let a = advantages(&returns, &baseline);
        prop_assert_eq!(a.len(), returns.len());
        if returns.len() == 1 {
            prop_assert!((a[0] - (returns[0] - b)).abs() < 1e-12);
        } else {
            let n = a.len() as f64;
            let mean = a.iter().sum::<f64>() / n;
            let var = a.iter().map(|x| x * x).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!(var < 1e-9 || (var - 1.0).abs() < 1e-9);
        }
    }
}
