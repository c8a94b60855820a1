//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, ParamCheck, REL_ERR_FLOOR};
pub use graph::{Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use tensor::{Gradients, ParameterStore, Tensor};

/// Softmax of `logits / temp` as a plain vector, max-subtracted.
pub fn softmax_vec(logits: &[f64], temp: f64) -> Vec<f64> {
    let max = logits
        .iter()
        .map(|v| v / temp)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v / temp - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Shannon entropy in nats.
pub fn entropy(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

/// `ln Σ exp(xᵢ)` with the usual max shift.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
