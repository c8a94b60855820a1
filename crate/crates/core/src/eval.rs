//! Task metrics: accuracy, F1, Pearson and Spearman correlation.
//!
//! Undefined values (a constant vector in a correlation, an F1 class with no
//! support) are reported as numbers with `undefined` set, so that rewards and
//! reports stay finite.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A metric value plus a flag marking a degenerate case.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: f64,
    pub undefined: bool,
}

impl MetricValue {
    fn defined(value: f64) -> Self {
        MetricValue {
            value,
            undefined: false,
        }
    }

    fn flagged(value: f64) -> Self {
        MetricValue {
            value,
            undefined: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub split: String,
    pub n: usize,
}

fn check_lengths<A, B>(preds: &[A], labels: &[B]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument("metric over empty input".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "metric length mismatch: {} predictions, {} labels",
            preds.len(),
            labels.len()
        )));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

fn class_f1(preds: &[usize], labels: &[usize], class: usize) -> MetricValue {
    let tp = preds
        .iter()
        .zip(labels)
        .filter(|(p, l)| **p == class && **l == class)
        .count() as f64;
    let fp = preds
        .iter()
        .zip(labels)
        .filter(|(p, l)| **p == class && **l != class)
        .count() as f64;
    let fn_ = preds
        .iter()
        .zip(labels)
        .filter(|(p, l)| **p != class && **l == class)
        .count() as f64;
    if tp + fp == 0.0 && tp + fn_ == 0.0 {
        return MetricValue::flagged(1.0);
    }
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    if precision + recall == 0.0 {
        return MetricValue::flagged(0.0);
    }
    MetricValue::defined(2.0 * precision * recall / (precision + recall))
}

/// F1 of the positive class for binary tasks, macro-averaged otherwise.
pub fn f1(
    preds: &[usize],
    labels: &[usize],
    num_classes: usize,
    positive_class: usize,
) -> Result<MetricValue> {
    check_lengths(preds, labels)?;
    if num_classes <= 2 {
        return Ok(class_f1(preds, labels, positive_class));
    }
    let per: Vec<MetricValue> = (0..num_classes)
        .map(|c| class_f1(preds, labels, c))
        .collect();
    let value = per.iter().map(|m| m.value).sum::<f64>() / num_classes as f64;
    Ok(MetricValue {
        value,
        undefined: per.iter().any(|m| m.undefined),
    })
}

pub fn pearson(preds: &[f64], labels: &[f64]) -> Result<MetricValue> {
    check_lengths(preds, labels)?;
    if preds.len() < 2 {
        return Err(Error::InvalidArgument(
            "correlation needs at least two points".into(),
        ));
    }
    let n = preds.len() as f64;
    let mp = preds.iter().sum::<f64>() / n;
    let ml = labels.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vp = 0.0;
    let mut vl = 0.0;
    for (p, l) in preds.iter().zip(labels) {
        cov += (p - mp) * (l - ml);
        vp += (p - mp) * (p - mp);
        vl += (l - ml) * (l - ml);
    }
    if vp == 0.0 || vl == 0.0 {
        return Ok(MetricValue::flagged(0.0));
    }
    Ok(MetricValue::defined(
        (cov / (vp.sqrt() * vl.sqrt())).clamp(-1.0, 1.0),
    ))
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(preds: &[f64], labels: &[f64]) -> Result<MetricValue> {
    check_lengths(preds, labels)?;
    pearson(&average_ranks(preds), &average_ranks(labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        assert!((accuracy(&[1, 0, 1], &[1, 1, 1]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn f1_cases() {
        // TP=1 (idx0), FP=1 (idx1), FN=1 (idx2)
        let m = f1(&[1, 1, 0, 0], &[1, 0, 1, 0], 2, 1).unwrap();
        assert!((m.value - 0.5).abs() < 1e-15);
        assert!(!m.undefined);
        assert_eq!(f1(&[0, 1, 1], &[0, 1, 1], 2, 1).unwrap().value, 1.0);
        let vacuous = f1(&[0, 0], &[0, 0], 2, 1).unwrap();
        assert_eq!(vacuous.value, 1.0);
        assert!(vacuous.undefined);
        assert!(f1(&[], &[], 2, 1).is_err());
    }

    #[test]
    fn macro_f1_for_three_classes() {
        let m = f1(&[0, 1, 2], &[0, 1, 2], 3, 0).unwrap();
        assert_eq!(m.value, 1.0);
    }

    #[test]
    fn correlations() {
        let x = [0.1, 0.5, 0.3, 0.9];
        assert!((pearson(&x, &x).unwrap().value - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &x).unwrap().value - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&neg, &x).unwrap().value + 1.0).abs() < 1e-12);
        assert!((spearman(&neg, &x).unwrap().value + 1.0).abs() < 1e-12);
        let cubed: Vec<f64> = x.iter().map(|v| (5.0 * v).exp()).collect();
        assert!((spearman(&cubed, &x).unwrap().value - 1.0).abs() < 1e-12);
        assert!(pearson(&cubed, &x).unwrap().value < 1.0);
    }

    #[test]
    fn constant_input_is_flagged_zero() {
        let m = pearson(&[1.0, 1.0, 1.0], &[0.0, 1.0, 2.0]).unwrap();
        assert_eq!(m.value, 0.0);
        assert!(m.undefined);
    }

    #[test]
    fn ties_get_average_rank() {
        assert_eq!(
            average_ranks(&[3.0, 1.0, 3.0, 2.0]),
            vec![3.5, 1.0, 3.5, 2.0]
        );
    }
}
