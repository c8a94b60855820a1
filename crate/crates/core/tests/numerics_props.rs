use l2a::numerics::{entropy, grad_check, log_sum_exp, softmax_vec, Graph, ParameterStore, Tensor, Var};
use l2a::Result;
use proptest::prelude::*;

fn store(name: &str, rows: usize, cols: usize, data: Vec<f64>) -> ParameterStore {
    let mut s = ParameterStore::new();
    s.insert(name, Tensor::matrix(rows, cols, data).unwrap()).unwrap();
    s
}

type Op = fn(&mut Graph<'_>, Var) -> Result<Var>;

const UNARY: &[(&str, Op)] = &[
    ("tanh", |g, x| Ok(g.tanh(x))),
    ("sigmoid", |g, x| Ok(g.sigmoid(x))),
    ("log_sigmoid", |g, x| Ok(g.log_sigmoid(x))),
    ("gelu", |g, x| Ok(g.gelu(x))),
    ("exp", |g, x| Ok(g.exp(x))),
    ("softmax", |g, x| g.softmax(x, 1.7, None)),
    ("log_softmax", |g, x| g.log_softmax(x, 0.8, None)),
    ("transpose", |g, x| g.transpose(x)),
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn elementwise_gradients_match_differences(
        data in prop::collection::vec(-2.0f64..2.0, 6),
        mix in prop::collection::vec(-1.0f64..1.0, 6),
    ) {
        let s = store("x", 2, 3, data);
        for (name, op) in UNARY {
            // A random linear readout keeps the loss from being symmetric.
            let report = grad_check(
                |g, p| {
                    let x = g.param(p, "x")?;
                    let y = op(g, x)?;
                    g.weighted_sum(y, &mix)
                },
                &s,
                1e-5,
                1e-4,
            ).unwrap();
            prop_assert!(report.max_rel_err() < 1e-4, "{name}: {}", report.max_rel_err());
        }
    }

    #[test]
    fn matmul_and_layer_norm_gradients(
        a in prop::collection::vec(-2.0f64..2.0, 6),
        b in prop::collection::vec(-2.0f64..2.0, 12),
        gain in prop::collection::vec(0.5f64..2.0, 4),
    ) {
        let mut s = store("a", 2, 3, a);
        s.insert("b", Tensor::matrix(3, 4, b).unwrap()).unwrap();
        s.insert("gain", Tensor::vector(gain)).unwrap();
        s.insert("bias", Tensor::vector(vec![0.1, -0.2, 0.3, 0.0])).unwrap();
        let report = grad_check(
            |g, p| {
                let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
                let (gain, bias) = (g.param(p, "gain")?, g.param(p, "bias")?);
                let y = g.matmul(a, b)?;
                let n = g.layer_norm(y, gain, bias, 1e-5)?;
                let sq = g.mul(n, y)?;
                Ok(g.mean(sq))
            },
            &s,
            1e-5,
            1e-4,
        ).unwrap();
        prop_assert!(report.max_rel_err() < 1e-4, "{}", report.max_rel_err());
    }

    #[test]
    fn softmax_is_a_distribution(
        logits in prop::collection::vec(-50.0f64..50.0, 1..40),
        temp in 0.05f64..20.0,
    ) {
        let p = softmax_vec(&logits, temp);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn entropy_grows_with_temperature(
        logits in prop::collection::vec(-5.0f64..5.0, 2..12),
        t in 0.1f64..10.0,
        factor in 1.0f64..4.0,
    ) {
        let lo = entropy(&softmax_vec(&logits, t));
        let hi = entropy(&softmax_vec(&logits, t * factor));
        prop_assert!(hi >= lo - 1e-12, "{lo} > {hi}");
        prop_assert!(hi <= (logits.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn log_sum_exp_is_shift_equivariant(
        xs in prop::collection::vec(-700.0f64..700.0, 1..20),
        c in -100.0f64..100.0,
    ) {
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        let a = log_sum_exp(&xs) + c;
        let b = log_sum_exp(&shifted);
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }
}
