//! Rank-based AUROC for multi-label predictions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("degenerate label column {0}: needs at least one positive and one negative")]
    DegenerateColumn(usize),
    #[error("degenerate label column: needs at least one positive and one negative")]
    Degenerate,
    #[error("scores and labels differ in shape: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
}

/// Area under the ROC curve: the Mann-Whitney U statistic over
/// `n_pos · n_neg`, with tied scores counted as one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::ShapeMismatch(vec![scores.len()], vec![labels.len()]));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::Degenerate);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // midranks (1-based) over tie groups; doubled to stay in integers
    let mut pos_rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_midrank = (i + 1 + j + 1) as u128;
        for &k in &order[i..=j] {
            if labels[k] {
                pos_rank_sum2 += twice_midrank;
            }
        }
        i = j + 1;
    }
    let (np, nn) = (n_pos as u128, n_neg as u128);
    // 2U = 2·R_pos − n_pos(n_pos+1)
    let twice_u = pos_rank_sum2 - np * (np + 1);
    Ok(twice_u as f64 / (2 * np * nn) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AurocReport {
    pub per_label: Vec<f64>,
    pub mean: f64,
    pub n_pos: Vec<usize>,
    pub n_neg: Vec<usize>,
}

/// Per-label AUROC over `[N × L]` score and 0/1 label matrices.
pub fn mean_auroc(scores: &Tensor, labels: &Tensor) -> Result<AurocReport, MetricError> {
    if scores.shape() != labels.shape() {
        return Err(MetricError::ShapeMismatch(
            scores.shape().to_vec(),
            labels.shape().to_vec(),
        ));
    }
    let (n, l) = (scores.rows(), scores.cols());
    let mut report = AurocReport {
        per_label: Vec::with_capacity(l),
        mean: 0.0,
        n_pos: Vec::with_capacity(l),
        n_neg: Vec::with_capacity(l),
    };
    for c in 0..l {
        let s: Vec<f64> = (0..n).map(|i| scores.row(i)[c]).collect();
        let y: Vec<bool> = (0..n).map(|i| labels.row(i)[c] > 0.5).collect();
        let a = auroc(&s, &y).map_err(|_| MetricError::DegenerateColumn(c))?;
        let pos = y.iter().filter(|v| **v).count();
        report.per_label.push(a);
        report.n_pos.push(pos);
        report.n_neg.push(n - pos);
    }
    report.mean = report.per_label.iter().sum::<f64>() / l.max(1) as f64;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// O(N²) pairwise count with ties at one half.
    fn pairwise(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn hand_examples() {
        let s = [0.9, 0.8, 0.3, 0.1];
        assert_eq!(auroc(&s, &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auroc(&s, &[true, false, true, false]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.4; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert!(matches!(auroc(&s, &[true; 4]), Err(MetricError::Degenerate)));
        assert!(auroc(&s, &[true; 4]).unwrap_err().to_string().contains("degenerate label column"));
    }

    #[test]
    fn single_label_report_and_permutation() {
        let scores = Tensor::new(vec![5, 1], vec![0.1, 0.7, 0.4, 0.4, 0.9]).unwrap();
        let labels = Tensor::new(vec![5, 1], vec![0.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
        let r = mean_auroc(&scores, &labels).unwrap();
        assert_eq!(r.mean, r.per_label[0]);
        let perm = [4, 2, 0, 3, 1];
        let r2 = mean_auroc(&scores.select_rows(&perm), &labels.select_rows(&perm)).unwrap();
        assert_eq!(r, r2);
        assert_eq!(r.n_pos, vec![3]);
        assert_eq!(r.n_neg, vec![2]);
    }

    #[test]
    fn degenerate_column_is_named() {
        let scores = Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let labels = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(
            mean_auroc(&scores, &labels).unwrap_err(),
            MetricError::DegenerateColumn(1)
        );
    }

    #[test]
    fn report_serializes_with_expected_keys() {
        let r = AurocReport {
            per_label: vec![0.5, 1.0],
            mean: 0.75,
            n_pos: vec![1, 2],
            n_neg: vec![3, 4],
        };
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for k in ["per_label", "mean", "n_pos", "n_neg"] {
            assert!(v.get(k).is_some());
        }
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..=64).prop_flat_map(|n| {
            (
                prop::collection::vec((0u8..8).prop_map(|v| v as f64 / 4.0), n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
    }

    proptest! {
        #[test]
        fn matches_pairwise_oracle((s, mut y) in instance()) {
            y[0] = true;
            y[1] = false;
            prop_assert_eq!(auroc(&s, &y).unwrap(), pairwise(&s, &y));
        }

        #[test]
        fn invariant_under_increasing_maps((s, mut y) in instance()) {
            y[0] = true;
            y[1] = false;
            let base = auroc(&s, &y).unwrap();
            let e: Vec<f64> = s.iter().map(|v| v.exp()).collect();
            let a: Vec<f64> = s.iter().map(|v| 2.0 * v + 1.0).collect();
            prop_assert_eq!(auroc(&e, &y).unwrap(), base);
            prop_assert_eq!(auroc(&a, &y).unwrap(), base);
        }

        #[test]
        fn negation_complements(n in 2usize..64, seed in any::<u64>()) {
            let mut st = seed | 1;
            let mut next = || { st ^= st << 13; st ^= st >> 7; st ^= st << 17; st };
            let s: Vec<f64> = (0..n).map(|i| i as f64 + (next() % 1000) as f64 * 1e-4).collect();
            let mut y: Vec<bool> = (0..n).map(|_| next() % 2 == 0).collect();
            y[0] = true;
            y[1] = false;
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            let total = auroc(&s, &y).unwrap() + auroc(&neg, &y).unwrap();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
