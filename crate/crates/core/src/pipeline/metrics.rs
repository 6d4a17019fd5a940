//! Binary classification metrics. Label 1 is the positive class for AUC.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub accuracy: f64,
    /// Unweighted mean over the two classes.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Index 0 = fake, 1 = real.
    pub per_class: [ClassMetrics; 2],
    /// `None` when only one class is present.
    pub auc: Option<f64>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn class_metrics(labels: &[u8], predicted: &[u8], class: u8) -> ClassMetrics {
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    for (&y, &p) in labels.iter().zip(predicted) {
        match (y == class, p == class) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            _ => {}
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassMetrics { precision, recall, f1 }
}

/// Probability that a random positive outranks a random negative, ties
/// counted as one half. Computed from average ranks.
pub fn auc(labels: &[u8], scores: &[f64]) -> Option<f64> {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}

pub fn classification(labels: &[u8], predicted: &[u8], scores: &[f64]) -> Metrics {
    let n = labels.len();
    let correct = labels.iter().zip(predicted).filter(|(a, b)| a == b).count();
    let per_class = [class_metrics(labels, predicted, 0), class_metrics(labels, predicted, 1)];
    Metrics {
        n,
        accuracy: ratio(correct, n),
        precision: (per_class[0].precision + per_class[1].precision) / 2.0,
        recall: (per_class[0].recall + per_class[1].recall) / 2.0,
        f1: (per_class[0].f1 + per_class[1].f1) / 2.0,
        per_class,
        auc: auc(labels, scores),
    }
}

/// Label 1 exactly when the score exceeds the threshold.
pub fn threshold_labels(scores: &[f64], threshold: f64) -> Vec<u8> {
    scores.iter().map(|&s| u8::from(s > threshold)).collect()
}

/// Threshold maximizing macro-F1 on `(labels, scores)`, searched over the
/// midpoints between consecutive distinct scores. Ties go to the lowest
/// threshold. Falls back to `default` when there is nothing to calibrate on.
pub fn calibrate_threshold(labels: &[u8], scores: &[f64], default: f64) -> f64 {
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if labels.is_empty() || distinct.len() < 2 {
        return default;
    }
    let mut best = (f64::NEG_INFINITY, default);
    for w in distinct.windows(2) {
        let t = (w[0] + w[1]) / 2.0;
        let f1 = classification(labels, &threshold_labels(scores, t), scores).f1;
        if f1 > best.0 {
            best = (f1, t);
        }
    }
    best.1
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_separation() {
        let labels = [0, 0, 1, 1];
        let scores = [0.1, 0.2, 0.7, 0.9];
        let m = classification(&labels, &threshold_labels(&scores, 0.5), &scores);
        assert_eq!((m.accuracy, m.auc), (1.0, Some(1.0)));
    }

    #[test]
    fn constant_scores_give_half_auc() {
        assert_eq!(auc(&[0, 1, 1, 0, 1], &[0.3; 5]), Some(0.5));
        assert_eq!(auc(&[1, 1], &[0.1, 0.2]), None);
    }

    #[test]
    fn hand_worked_confusion() {
        // real (1): predicted 1,1,0; fake (0): predicted 1,0,0
        let labels = [1, 1, 1, 0, 0, 0];
        let predicted = [1, 1, 0, 1, 0, 0];
        let m = classification(&labels, &predicted, &[0.0; 6]);
        let real = m.per_class[1];
        let fake = m.per_class[0];
        assert!((real.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((real.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((fake.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((fake.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.accuracy - 4.0 / 6.0).abs() < 1e-15);

        let predicted = [1, 1, 1, 1, 1, 0];
        let m = classification(&labels, &predicted, &[0.0; 6]);
        assert!((m.per_class[1].precision - 0.6).abs() < 1e-15);
        assert_eq!(m.per_class[1].recall, 1.0);
        assert_eq!(m.per_class[0].precision, 1.0);
        assert!((m.per_class[0].recall - 1.0 / 3.0).abs() < 1e-15);
        assert!((m.per_class[1].f1 - 0.75).abs() < 1e-15);
        assert!((m.per_class[0].f1 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn auc_counts_ties_as_half() {
        // pairs (pos, neg): (0.5,0.5) tie, (0.5,0.2) win, (0.9,0.5) win, (0.9,0.2) win
        assert_eq!(auc(&[1, 0, 1, 0], &[0.5, 0.5, 0.9, 0.2]), Some(3.5 / 4.0));
    }

    #[test]
    fn calibration_finds_separating_cut() {
        let labels = [0, 0, 1, 1];
        let t = calibrate_threshold(&labels, &[0.01, 0.02, 0.05, 0.06], 0.1);
        assert!(t > 0.02 && t < 0.05);
        assert_eq!(calibrate_threshold(&[], &[], 0.1), 0.1);
    }

    proptest! {
        #[test]
        fn auc_invariant_under_increasing_maps(scores in proptest::collection::vec(-5.0f64..5.0, 2..40), seed in 0u64..1000) {
            let labels: Vec<u8> = (0..scores.len()).map(|i| ((i as u64 * 7 + seed) % 3 == 0) as u8).collect();
            let mapped: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 3.0).collect();
            prop_assert_eq!(auc(&labels, &scores), auc(&labels, &mapped));
        }

        #[test]
        fn scaled_threshold_keeps_decisions(scores in proptest::collection::vec(0.0f64..1.0, 1..40), t in 0.0f64..1.0, c in 0.1f64..10.0) {
            let scaled: Vec<f64> = scores.iter().map(|s| s * c).collect();
            prop_assert_eq!(threshold_labels(&scores, t), threshold_labels(&scaled, t * c));
        }
    }
}
