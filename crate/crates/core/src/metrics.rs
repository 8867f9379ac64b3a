//! Screening metrics: confusion counts, derived ratios, ROC analysis with
//! midrank tie handling, and the Youden index.
//!
//! The positive class is asthma throughout. Ratios with zero denominators are
//! reported as absent, never coerced to zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by metric computation.
#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    /// The metric has no defined value on this input (e.g. single-class AUC).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
}

/// Binary confusion counts; positive class = asthma.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Screening metrics derived from confusion counts; `roc_auc` is present only
/// for score-producing models. Undefined ratios are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub specificity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub youden_j: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub roc_auc: Option<f64>,
    pub counts: ConfusionCounts,
}

/// Counts prediction outcomes against ground truth.
pub fn confusion(labels: &[bool], predictions: &[bool]) -> Result<ConfusionCounts, MetricsError> {
    if labels.len() != predictions.len() {
        return Err(MetricsError::InvalidParameter(format!(
            "{} labels vs {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    if labels.is_empty() {
        return Err(MetricsError::InvalidParameter("empty input".into()));
    }
    let mut c = ConfusionCounts {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for (&y, &p) in labels.iter().zip(predictions) {
        match (y, p) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Derives the ratio metrics from confusion counts (`roc_auc` left absent).
pub fn summarize(counts: ConfusionCounts) -> Result<MetricsReport, MetricsError> {
    let total = counts.total();
    if total == 0 {
        return Err(MetricsError::InvalidParameter("zero evaluated items".into()));
    }
    let ratio = |num: usize, den: usize| -> Option<f64> {
        if den > 0 {
            Some(num as f64 / den as f64)
        } else {
            None
        }
    };
    let accuracy = (counts.tp + counts.tn) as f64 / total as f64;
    let precision = ratio(counts.tp, counts.tp + counts.fp);
    let recall = ratio(counts.tp, counts.tp + counts.fn_);
    let specificity = ratio(counts.tn, counts.tn + counts.fp);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    let youden_j = match (recall, specificity) {
        (Some(se), Some(sp)) => Some(se + sp - 1.0),
        _ => None,
    };
    Ok(MetricsReport {
        accuracy,
        precision,
        recall,
        specificity,
        f1,
        youden_j,
        roc_auc: None,
        counts,
    })
}

fn check_scores(labels: &[bool], scores: &[f64]) -> Result<(usize, usize), MetricsError> {
    if labels.len() != scores.len() {
        return Err(MetricsError::InvalidParameter(format!(
            "{} labels vs {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MetricsError::InvalidParameter("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::UndefinedMetric(
            "ROC AUC needs both classes".into(),
        ));
    }
    Ok((n_pos, n_neg))
}

/// ROC AUC by the Mann–Whitney rank statistic with midranks for ties:
/// P(score_pos > score_neg) + ½·P(tie).
pub fn roc_auc(labels: &[bool], scores: &[f64]) -> Result<f64, MetricsError> {
    let (n_pos, n_neg) = check_scores(labels, scores)?;

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    // Midranks: tied scores share the average of their 1-based rank span.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }

    let auc = (rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64;
    Ok(auc)
}

/// One operating point on the ROC curve; prediction rule is
/// `score >= threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

/// ROC curve points from (0,0) to (1,1), one per distinct score, thresholds
/// descending.
pub fn roc_points(labels: &[bool], scores: &[f64]) -> Result<Vec<RocPoint>, MetricsError> {
    let (n_pos, n_neg) = check_scores(labels, scores)?;

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
            threshold,
        });
    }
    Ok(points)
}

/// The ROC point maximizing Youden's J = tpr − fpr (ties broken toward the
/// higher threshold).
///
/// J is compared exactly via the integer form `tp·n_neg − fp·n_pos`, so
/// points whose J values are mathematically equal never split on
/// floating-point rounding.
pub fn youden_optimal_point(labels: &[bool], scores: &[f64]) -> Result<RocPoint, MetricsError> {
    let (n_pos, n_neg) = check_scores(labels, scores)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let mut best = RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    };
    let mut best_j: i128 = 0; // J numerator of the (0,0) point
    let (mut tp, mut fp) = (0i128, 0i128);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let j = tp * n_neg as i128 - fp * n_pos as i128;
        // Strict improvement only: earlier points have higher thresholds.
        if j > best_j {
            best_j = j;
            best = RocPoint {
                fpr: fp as f64 / n_neg as f64,
                tpr: tp as f64 / n_pos as f64,
                threshold,
            };
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// O(n_pos · n_neg) pairwise definition of AUC, used as the oracle.
    fn auc_pairwise(labels: &[bool], scores: &[f64]) -> f64 {
        let pos: Vec<f64> = labels
            .iter()
            .zip(scores)
            .filter(|(&y, _)| y)
            .map(|(_, &s)| s)
            .collect();
        let neg: Vec<f64> = labels
            .iter()
            .zip(scores)
            .filter(|(&y, _)| !y)
            .map(|(_, &s)| s)
            .collect();
        let mut acc = 0.0;
        for &p in &pos {
            for &n in &neg {
                if p > n {
                    acc += 1.0;
                } else if p == n {
                    acc += 0.5;
                }
            }
        }
        acc / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn confusion_perfect_all_positive() {
        let y = vec![true; 10];
        let c = confusion(&y, &y).unwrap();
        assert_eq!((c.tp, c.fp, c.tn, c.fn_), (10, 0, 0, 0));
    }

    #[test]
    fn confusion_collapse_signature() {
        // All-negative predictions on all-positive labels: 100% false negatives.
        let labels = vec![true; 25];
        let preds = vec![false; 25];
        let c = confusion(&labels, &preds).unwrap();
        assert_eq!(c.fn_, 25);
        assert_eq!(c.tp + c.fp + c.tn, 0);
    }

    #[test]
    fn confusion_length_mismatch() {
        assert!(matches!(
            confusion(&[true, false], &[true]),
            Err(MetricsError::InvalidParameter(_))
        ));
    }

    #[test]
    fn summarize_f1_example() {
        // precision = 790/870 ≈ 0.908, recall = 0.790 -> F1 ≈ 0.845
        let c = ConfusionCounts {
            tp: 790,
            fp: 80,
            tn: 920,
            fn_: 210,
        };
        let r = summarize(c).unwrap();
        assert!((r.precision.unwrap() - 0.908).abs() < 1e-3);
        assert!((r.recall.unwrap() - 0.790).abs() < 1e-12);
        assert!((r.f1.unwrap() - 0.845).abs() < 1e-3);
    }

    #[test]
    fn summarize_youden_example() {
        // sensitivity 0.93, specificity 0.81 -> J = 0.74
        let c = ConfusionCounts {
            tp: 93,
            fn_: 7,
            tn: 81,
            fp: 19,
        };
        let r = summarize(c).unwrap();
        assert!((r.youden_j.unwrap() - 0.74).abs() < 1e-12);
    }

    #[test]
    fn summarize_perfect_classifier() {
        let c = ConfusionCounts {
            tp: 40,
            fp: 0,
            tn: 60,
            fn_: 0,
        };
        let r = summarize(c).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.precision, Some(1.0));
        assert_eq!(r.recall, Some(1.0));
        assert_eq!(r.specificity, Some(1.0));
        assert_eq!(r.f1, Some(1.0));
        assert_eq!(r.youden_j, Some(1.0));
        assert_eq!(r.roc_auc, None);
    }

    #[test]
    fn summarize_undefined_ratios_are_absent() {
        // No positive predictions and no positive labels.
        let c = ConfusionCounts {
            tp: 0,
            fp: 0,
            tn: 5,
            fn_: 0,
        };
        let r = summarize(c).unwrap();
        assert_eq!(r.precision, None);
        assert_eq!(r.recall, None);
        assert_eq!(r.f1, None);
        assert_eq!(r.youden_j, None);
        let json = serde_json::to_string(&r).unwrap();
        assert!(!json.contains("precision"));
        assert!(!json.contains("\"recall\""));
    }

    #[test]
    fn summarize_empty_counts_error() {
        let c = ConfusionCounts {
            tp: 0,
            fp: 0,
            tn: 0,
            fn_: 0,
        };
        assert!(matches!(
            summarize(c),
            Err(MetricsError::InvalidParameter(_))
        ));
    }

    #[test]
    fn auc_perfect_separation() {
        let labels = [true, true, false, false];
        let scores = [0.9, 0.8, 0.2, 0.1];
        assert_eq!(roc_auc(&labels, &scores).unwrap(), 1.0);
    }

    #[test]
    fn auc_all_ties_is_half() {
        let labels = [true, false, true, false, false];
        let scores = [0.5; 5];
        assert_eq!(roc_auc(&labels, &scores).unwrap(), 0.5);
    }

    #[test]
    fn auc_worked_example() {
        let labels = [true, false, true, false];
        let scores = [0.9, 0.8, 0.7, 0.1];
        assert!((roc_auc(&labels, &scores).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn auc_single_class_is_undefined() {
        assert!(matches!(
            roc_auc(&[true, true], &[0.5, 0.2]),
            Err(MetricsError::UndefinedMetric(_))
        ));
    }

    #[test]
    fn youden_swap_invariance() {
        let c = ConfusionCounts {
            tp: 30,
            fp: 12,
            tn: 45,
            fn_: 13,
        };
        let swapped = ConfusionCounts {
            tp: c.tn,
            fp: c.fn_,
            tn: c.tp,
            fn_: c.fp,
        };
        let a = summarize(c).unwrap().youden_j.unwrap();
        let b = summarize(swapped).unwrap().youden_j.unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn youden_optimal_point_on_known_curve() {
        let labels = [true, true, true, false, false, false];
        let scores = [0.9, 0.8, 0.4, 0.5, 0.2, 0.1];
        let p = youden_optimal_point(&labels, &scores).unwrap();
        // Threshold 0.8: tpr = 2/3, fpr = 0 -> J = 2/3 is the maximum.
        assert_eq!(p.threshold, 0.8);
        assert!((p.tpr - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(p.fpr, 0.0);
    }

    #[test]
    fn roc_points_endpoints() {
        let labels = [true, false, true, false];
        let scores = [0.9, 0.8, 0.7, 0.1];
        let pts = roc_points(&labels, &scores).unwrap();
        assert_eq!((pts[0].fpr, pts[0].tpr), (0.0, 0.0));
        let last = pts.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        for w in pts.windows(2) {
            assert!(w[0].threshold > w[1].threshold);
            assert!(w[0].fpr <= w[1].fpr && w[0].tpr <= w[1].tpr);
        }
    }

    fn arb_instance() -> impl Strategy<Value = (Vec<bool>, Vec<f64>)> {
        (2usize..200).prop_flat_map(|n| {
            (
                proptest::collection::vec(any::<bool>(), n),
                // Coarse grid forces plenty of ties.
                proptest::collection::vec(0i32..20, n)
                    .prop_map(|v| v.into_iter().map(|x| x as f64 / 10.0).collect()),
            )
        })
    }

    proptest! {
        /// Rank-based AUC equals exhaustive pairwise enumeration, ties included.
        #[test]
        fn auc_matches_pairwise((labels, scores) in arb_instance()) {
            prop_assume!(labels.iter().any(|&y| y) && labels.iter().any(|&y| !y));
            let fast = roc_auc(&labels, &scores).unwrap();
            let slow = auc_pairwise(&labels, &scores);
            prop_assert!((fast - slow).abs() < 1e-12);
        }

        /// Score negation flips AUC around ½ when scores are tie-free.
        #[test]
        fn auc_negation_symmetry(n in 2usize..100, seed in any::<u64>()) {
            let mut state = seed | 1;
            let mut next = move || {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                state
            };
            let labels: Vec<bool> = (0..n).map(|_| next() % 2 == 0).collect();
            prop_assume!(labels.iter().any(|&y| y) && labels.iter().any(|&y| !y));
            // Distinct scores by construction.
            let mut scores: Vec<f64> = (0..n).map(|i| i as f64).collect();
            for i in (1..n).rev() {
                scores.swap(i, (next() % (i as u64 + 1)) as usize);
            }
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let a = roc_auc(&labels, &scores).unwrap();
            let b = roc_auc(&labels, &neg).unwrap();
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }

        /// AUC is invariant under strictly monotone score transforms.
        #[test]
        fn auc_monotone_invariance((labels, scores) in arb_instance()) {
            prop_assume!(labels.iter().any(|&y| y) && labels.iter().any(|&y| !y));
            let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s + 1.0).exp()).collect();
            let a = roc_auc(&labels, &scores).unwrap();
            let b = roc_auc(&labels, &transformed).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        /// Trapezoid area under roc_points equals the rank AUC.
        #[test]
        fn roc_points_area_equals_auc((labels, scores) in arb_instance()) {
            prop_assume!(labels.iter().any(|&y| y) && labels.iter().any(|&y| !y));
            let pts = roc_points(&labels, &scores).unwrap();
            let area: f64 = pts
                .windows(2)
                .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
                .sum();
            let auc = roc_auc(&labels, &scores).unwrap();
            prop_assert!((area - auc).abs() < 1e-12);
        }

        /// Confusion counts match a per-item recount.
        #[test]
        fn confusion_matches_enumeration(
            pairs in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..300)
        ) {
            let labels: Vec<bool> = pairs.iter().map(|p| p.0).collect();
            let preds: Vec<bool> = pairs.iter().map(|p| p.1).collect();
            let c = confusion(&labels, &preds).unwrap();
            let tp = pairs.iter().filter(|(y, p)| *y && *p).count();
            let fp = pairs.iter().filter(|(y, p)| !*y && *p).count();
            let tn = pairs.iter().filter(|(y, p)| !*y && !*p).count();
            let fn_ = pairs.iter().filter(|(y, p)| *y && !*p).count();
            prop_assert_eq!((c.tp, c.fp, c.tn, c.fn_), (tp, fp, tn, fn_));
            prop_assert_eq!(c.total(), pairs.len());
        }
    }
}
