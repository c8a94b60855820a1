use l2a::augment::{
    count_at_distance, distance_distribution, sample_augmented, sample_positions,
    score_augmented, SamplerConfig,
};
use l2a::model::{Encoder, HeadKind, ModelConfig};
use l2a::text::{Domain, Encoded, Label, CLS, NUM_RESERVED, SEP};
use num_bigint::BigUint;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = NUM_RESERVED + 7;

fn generator() -> Encoder {
    let cfg = ModelConfig {
        layers: 1,
        hidden: 8,
        heads: 2,
        ffn: 16,
        vocab_size: VOCAB,
        max_len: 12,
        head: HeadKind::Mlm,
    };
    Encoder::init(cfg, 3).unwrap()
}

fn input(words: &[u32], pad: usize) -> Encoded {
    let mut ids = vec![CLS];
    ids.extend(words);
    ids.push(SEP);
    let valid_len = ids.len();
    let mut editable: Vec<bool> = (0..valid_len).map(|i| i > 0 && i + 1 < valid_len).collect();
    ids.extend(std::iter::repeat(0).take(pad));
    editable.extend(std::iter::repeat(false).take(pad));
    Encoded {
        ids,
        editable,
        valid_len,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn counts_partition_all_sequences(m in 0usize..30, s in 0usize..50) {
        let total = (0..=m).fold(BigUint::from(0u32), |acc, e| acc + count_at_distance(e, m, s).unwrap());
        prop_assert_eq!(total, BigUint::from(s + 1).pow(m as u32));
    }

    #[test]
    fn distance_distribution_normalizes(m in 0usize..200, s in 1usize..40_000, alpha in 0.05f64..5.0) {
        let d = distance_distribution(m, s, alpha).unwrap();
        prop_assert_eq!(d.probs.len(), m + 1);
        prop_assert!((d.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for (p, lp) in d.probs.iter().zip(&d.log_probs) {
            prop_assert!(lp.is_finite() && (p - lp.exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn positions_are_a_sorted_subset(n in 0usize..15, frac in 0.0f64..=1.0, seed in any::<u64>()) {
        let editable: Vec<usize> = (0..n).map(|i| 2 * i + 1).collect();
        let d = (frac * n as f64).floor() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = sample_positions(d, &editable, &mut rng).unwrap();
        prop_assert_eq!(p.len(), d);
        prop_assert!(p.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(p.iter().all(|i| editable.contains(i)));
    }

    #[test]
    fn samples_edit_only_what_they_report(
        words in prop::collection::vec(NUM_RESERVED as u32..VOCAB as u32, 1..8),
        pad in 0usize..3,
        alpha in 0.2f64..3.0,
        temperature in 0.5f64..4.0,
        seed in any::<u64>(),
    ) {
        let gen = generator();
        let x = input(&words, pad);
        let config = SamplerConfig { alpha, temperature, ..SamplerConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = sample_augmented(&x, Label::Class(0), Domain::Source, 4, &config, &gen, &mut rng).unwrap();

        prop_assert_eq!(s.z.ids.len(), x.ids.len());
        prop_assert_eq!(&s.z.editable, &x.editable);
        let changed: Vec<usize> = (0..x.ids.len()).filter(|&i| s.z.ids[i] != x.ids[i]).collect();
        prop_assert_eq!(&changed, &s.positions);
        prop_assert_eq!(changed.len(), s.d);
        for (k, &p) in s.positions.iter().enumerate() {
            prop_assert!(x.editable[p]);
            prop_assert_eq!(s.z.ids[p], s.words[k]);
            prop_assert_eq!(x.ids[p], s.originals[k]);
            prop_assert!(s.words[k] as usize >= NUM_RESERVED);
        }
        prop_assert!(s.log_ps.is_finite() && s.log_ps <= 0.0);
        let rescored = score_augmented(&x, &s.z.ids, &config, &gen).unwrap();
        prop_assert!((rescored - s.log_ps).abs() < 1e-9);
    }
}

#[test]
fn editing_a_fixed_position_scores_zero_probability() {
    let gen = generator();
    let x = input(&[5, 6, 7], 0);
    let mut z = x.ids.clone();
    z[0] = 8;
    let lp = score_augmented(&x, &z, &SamplerConfig::default(), &gen).unwrap();
    assert_eq!(lp, f64::NEG_INFINITY);
}
