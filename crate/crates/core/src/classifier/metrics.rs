use serde::{Deserialize, Serialize};

/// Macro-averaged classification metrics.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub roc_auc: f64,
    pub wall_time_s: f64,
}

impl MetricsReport {
    /// The five quality metrics in report order.
    pub fn values(&self) -> [f64; 5] {
        [self.accuracy, self.precision, self.recall, self.f1, self.roc_auc]
    }

    /// Equality ignoring wall time.
    pub fn same_scores(&self, other: &Self) -> bool {
        self.values() == other.values()
    }
}

/// `matrix[truth][predicted]` counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            counts: vec![vec![0; n_classes]; n_classes],
        }
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], n_classes: usize) -> Self {
        let mut m = Self::new(n_classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            m.counts[t][p] += 1;
        }
        m
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// Exact merge of matrices computed on disjoint shards.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let trace: usize = (0..self.n_classes()).map(|i| self.counts[i][i]).sum();
        trace as f64 / total as f64
    }

    /// Per-class (precision, recall, f1); undefined ratios count as 0.
    pub fn per_class(&self) -> Vec<(f64, f64, f64)> {
        let k = self.n_classes();
        (0..k)
            .map(|c| {
                let tp = self.counts[c][c] as f64;
                let predicted: usize = (0..k).map(|t| self.counts[t][c]).sum();
                let actual: usize = self.counts[c].iter().sum();
                let p = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
                let r = if actual > 0 { tp / actual as f64 } else { 0.0 };
                let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
                (p, r, f)
            })
            .collect()
    }

    /// Macro averages over all classes, absent ones included as zeros.
    pub fn macro_prf(&self) -> (f64, f64, f64) {
        let per = self.per_class();
        let k = per.len().max(1) as f64;
        let sum = per.iter().fold((0.0, 0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
        (sum.0 / k, sum.1 / k, sum.2 / k)
    }
}

/// Area under the ROC curve of `scores` for binary `positive` labels,
/// integrated with the trapezoidal rule over distinct score thresholds.
/// `None` when either class is missing.
pub fn roc_auc_binary(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let tpr = tp as f64 / n_pos as f64;
        let fpr = fp as f64 / n_neg as f64;
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Some(area)
}

/// Macro one-vs-rest ROC-AUC over classes that have both positive and
/// negative test examples.
pub fn roc_auc_macro(scores: &[Vec<f64>], truth: &[usize], n_classes: usize) -> f64 {
    let aucs: Vec<f64> = (0..n_classes)
        .filter_map(|c| {
            let s: Vec<f64> = scores.iter().map(|row| row[c]).collect();
            let pos: Vec<bool> = truth.iter().map(|&t| t == c).collect();
            roc_auc_binary(&s, &pos)
        })
        .collect();
    if aucs.is_empty() {
        0.0
    } else {
        aucs.iter().sum::<f64>() / aucs.len() as f64
    }
}

/// Predicted class: highest score, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Full report from per-class scores (rows sum to anything; argmax decides).
pub fn metrics_from_scores(scores: &[Vec<f64>], truth: &[usize], n_classes: usize) -> MetricsReport {
    let predicted: Vec<usize> = scores.iter().map(|r| argmax(r)).collect();
    let cm = ConfusionMatrix::from_predictions(truth, &predicted, n_classes);
    let (precision, recall, f1) = cm.macro_prf();
    MetricsReport {
        accuracy: cm.accuracy(),
        precision,
        recall,
        f1,
        roc_auc: roc_auc_macro(scores, truth, n_classes),
        wall_time_s: 0.0,
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::rng;

    fn one_hot(truth: &[usize], k: usize) -> Vec<Vec<f64>> {
        truth
            .iter()
            .map(|&t| (0..k).map(|c| if c == t { 1.0 } else { 0.0 }).collect())
            .collect()
    }

    #[test]
    fn perfect_predictor_scores_one() {
        let truth: Vec<usize> = (0..21).map(|i| i % 7).collect();
        let m = metrics_from_scores(&one_hot(&truth, 7), &truth, 7);
        assert_eq!(m.values(), [1.0; 5]);
    }

    #[test]
    fn absent_class_counts_as_zero() {
        let truth = [0, 0, 1, 1];
        let m = metrics_from_scores(&one_hot(&truth, 3), &truth, 3);
        assert_eq!(m.accuracy, 1.0);
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.roc_auc, 1.0);
    }

    #[test]
    fn macro_f1_matches_hand_computation() {
        // truth/pred pairs: class0: tp=2 fn=1, class1: tp=1 fp=1 fn=1, class2: fp=1 tp=1
        let truth = [0, 0, 0, 1, 1, 2];
        let pred = [0, 0, 1, 1, 2, 0];
        let cm = ConfusionMatrix::from_predictions(&truth, &pred, 3);
        let p0 = 2.0 / 3.0;
        let r0 = 2.0 / 3.0;
        let p1 = 1.0 / 2.0;
        let r1 = 1.0 / 2.0;
        let p2 = 0.0;
        let r2 = 0.0;
        let f = |p: f64, r: f64| if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        let expected = (f(p0, r0) + f(p1, r1) + f(p2, r2)) / 3.0;
        let (p, r, f1) = cm.macro_prf();
        assert_eq!(f1, expected);
        assert_eq!(p, (p0 + p1 + p2) / 3.0);
        assert_eq!(r, (r0 + r1 + r2) / 3.0);
        assert_eq!(cm.accuracy(), 3.0 / 6.0);
    }

    #[test]
    fn auc_known_values() {
        assert_eq!(roc_auc_binary(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]), Some(1.0));
        assert_eq!(roc_auc_binary(&[0.1, 0.2, 0.8, 0.9], &[true, true, false, false]), Some(0.0));
        assert_eq!(roc_auc_binary(&[0.5; 4], &[true, false, true, false]), Some(0.5));
        // One swapped pair out of four: Mann-Whitney 3/4.
        assert_eq!(roc_auc_binary(&[0.9, 0.3, 0.5, 0.1], &[true, true, false, false]), Some(0.75));
        assert_eq!(roc_auc_binary(&[0.3], &[true]), None);
    }

    #[test]
    fn random_scores_give_half_auc() {
        let mut r = rng::stream(5);
        let n = 20000;
        let scores: Vec<f64> = (0..n).map(|_| r.random()).collect();
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let auc = roc_auc_binary(&scores, &labels).unwrap();
        assert!((auc - 0.5).abs() < 0.05, "{auc}");
    }

    fn mann_whitney(scores: &[f64], pos: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if pos[i] && !pos[j] {
                    pairs += 1.0;
                    wins += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        wins / pairs
    }

    proptest! {
        #[test]
        fn auc_equals_mann_whitney(data in proptest::collection::vec((0u8..6, any::<bool>()), 2..40)) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64).collect();
            let pos: Vec<bool> = data.iter().map(|d| d.1).collect();
            if let Some(auc) = roc_auc_binary(&scores, &pos) {
                prop_assert!((auc - mann_whitney(&scores, &pos)).abs() < 1e-12);
            }
        }

        #[test]
        fn metrics_bounded_and_order_invariant(rows in proptest::collection::vec((0usize..4, proptest::collection::vec(0.0f64..1.0, 4)), 1..30)) {
            let truth: Vec<usize> = rows.iter().map(|r| r.0).collect();
            let scores: Vec<Vec<f64>> = rows.iter().map(|r| r.1.clone()).collect();
            let m = metrics_from_scores(&scores, &truth, 4);
            for v in m.values() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let cm = ConfusionMatrix::from_predictions(&truth, &scores.iter().map(|r| argmax(r)).collect::<Vec<_>>(), 4);
            for (p, r, f) in cm.per_class() {
                prop_assert!(f <= p.max(r) + 1e-12);
            }
            let mut t2 = truth.clone();
            let mut s2 = scores.clone();
            t2.reverse();
            s2.reverse();
            let m2 = metrics_from_scores(&s2, &t2, 4);
            prop_assert!(m.same_scores(&m2));
        }

        #[test]
        fn shard_merge_is_exact(truth in proptest::collection::vec(0usize..3, 1..30), split in 0usize..30) {
            let pred: Vec<usize> = truth.iter().map(|t| (t * 2 + 1) % 3).collect();
            let cut = split.min(truth.len());
            let full = ConfusionMatrix::from_predictions(&truth, &pred, 3);
            let mut a = ConfusionMatrix::from_predictions(&truth[..cut], &pred[..cut], 3);
            a.merge(&ConfusionMatrix::from_predictions(&truth[cut..], &pred[cut..], 3));
            prop_assert_eq!(a, full);
        }
    }
}
