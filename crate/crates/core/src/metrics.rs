//! Classification metrics: rank-based ROC AUC, accuracy, weighted F1,
//! per-class accuracy and confusion counts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary ROC AUC via the Mann-Whitney statistic with average ranks for
/// tied scores. `None` when either class is absent.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len(), "one label per score");
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum_pos += avg * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Macro one-vs-rest AUC. Classes absent from `labels` (or the only class
/// present) have no defined AUC and are returned in the second slot.
pub fn macro_ovr_auc(probs: &[Vec<f64>], labels: &[usize], n_classes: usize) -> (Option<f64>, Vec<usize>) {
    if n_classes == 2 {
        let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        return match roc_auc(&scores, &pos) {
            Some(a) => (Some(a), vec![]),
            None => (None, vec![0, 1]),
        };
    }
    let mut total = 0.0;
    let mut used = 0;
    let mut excluded = Vec::new();
    for c in 0..n_classes {
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        match roc_auc(&scores, &pos) {
            Some(a) => {
                total += a;
                used += 1;
            }
            None => excluded.push(c),
        }
    }
    ((used > 0).then(|| total / used as f64), excluded)
}

/// Binary: class 1 when its probability is at least 0.5. Multiclass:
/// argmax, ties to the lower class.
pub fn predict(probs: &[f64]) -> usize {
    if probs.len() == 2 {
        return usize::from(probs[1] >= 0.5);
    }
    let mut best = 0;
    for (c, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = c;
        }
    }
    best
}

/// `confusion[true][predicted]`
pub fn confusion_matrix(labels: &[usize], preds: &[usize], n_classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; n_classes]; n_classes];
    for (&l, &p) in labels.iter().zip(preds) {
        m[l][p] += 1;
    }
    m
}

/// Support-weighted mean of per-class F1, from the confusion matrix alone.
pub fn weighted_f1(confusion: &[Vec<usize>]) -> f64 {
    let c = confusion.len();
    let total: usize = confusion.iter().flatten().sum();
    if total == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for k in 0..c {
        let tp = confusion[k][k] as f64;
        let support: usize = confusion[k].iter().sum();
        let predicted: usize = (0..c).map(|r| confusion[r][k]).sum();
        let denom = support as f64 + predicted as f64;
        let f1 = if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
        acc += f1 * support as f64;
    }
    acc / total as f64
}

pub fn per_class_accuracy(confusion: &[Vec<usize>]) -> Vec<Option<f64>> {
    confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let support: usize = row.iter().sum();
            (support > 0).then(|| row[k] as f64 / support as f64)
        })
        .collect()
}

/// Metrics of one evaluation pass. Accuracy, AUC and weighted F1 are
/// fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub auc: f64,
    pub weighted_f1: f64,
    /// Recall of each class; `None` for classes absent from the set.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub confusion: Vec<Vec<usize>>,
    pub n_eval: usize,
    /// Classes left out of the macro AUC.
    #[serde(default)]
    pub auc_excluded_classes: Vec<usize>,
}

impl MetricsReport {
    pub fn compute(probs: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Result<Self> {
        if probs.len() != labels.len() || probs.is_empty() {
            return Err(Error::Input("metrics need one probability row per label".into()));
        }
        if probs.iter().any(|p| p.len() != n_classes) {
            return Err(Error::dim("probability rows must have one entry per class"));
        }
        let (auc, excluded) = macro_ovr_auc(probs, labels, n_classes);
        let auc = auc.ok_or_else(|| {
            Error::Input("AUC undefined: the evaluation set holds a single class".into())
        })?;
        if !excluded.is_empty() {
            log::warn!("classes {excluded:?} absent from evaluation set; excluded from AUC");
        }
        let preds: Vec<usize> = probs.iter().map(|p| predict(p)).collect();
        let confusion = confusion_matrix(labels, &preds, n_classes);
        let correct: usize = (0..n_classes).map(|k| confusion[k][k]).sum();
        Ok(Self {
            accuracy: correct as f64 / labels.len() as f64,
            auc,
            weighted_f1: weighted_f1(&confusion),
            per_class_accuracy: per_class_accuracy(&confusion),
            confusion,
            n_eval: labels.len(),
            auc_excluded_classes: excluded,
        })
    }
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator); 0 for a single value.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_inverted_separation() {
        let s = [0.1, 0.2, 0.8, 0.9];
        let l = [false, false, true, true];
        assert_eq!(roc_auc(&s, &l), Some(1.0));
        let inv = [true, true, false, false];
        assert_eq!(roc_auc(&s, &inv), Some(0.0));
        assert_eq!(roc_auc(&s, &[true; 4]), None);
    }

    #[test]
    fn all_tied_scores_give_half() {
        assert_eq!(roc_auc(&[0.5; 6], &[true, false, true, false, false, true]), Some(0.5));
    }

    #[test]
    fn summary_two_values() {
        let s = Summary::of(&[80.0, 90.0]);
        assert_eq!(s.mean, 85.0);
        assert!((s.std - 7.0710678118654755).abs() < 1e-12);
        assert_eq!(Summary::of(&[3.0, 3.0, 3.0]).std, 0.0);
    }

    #[test]
    fn threshold_and_argmax() {
        assert_eq!(predict(&[0.5, 0.5]), 1);
        assert_eq!(predict(&[0.51, 0.49]), 0);
        assert_eq!(predict(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn weighted_f1_hand_case() {
        // class 0: tp 3, fn 1, fp 2 → f1 = 6/9; class 1: tp 4, fn 2, fp 1 → 8/11
        let conf = vec![vec![3, 1], vec![2, 4]];
        let expect = (4.0 * (6.0 / 9.0) + 6.0 * (8.0 / 11.0)) / 10.0;
        assert!((weighted_f1(&conf) - expect).abs() < 1e-15);
    }

    #[test]
    fn report_accuracy_matches_trace() {
        let probs = vec![vec![0.9, 0.1], vec![0.3, 0.7], vec![0.6, 0.4], vec![0.2, 0.8]];
        let labels = [0, 1, 1, 0];
        let r = MetricsReport::compute(&probs, &labels, 2).unwrap();
        assert_eq!(r.confusion, vec![vec![1, 1], vec![1, 1]]);
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.auc, 0.5);
        assert_eq!(r.n_eval, 4);
    }

    #[test]
    fn missing_class_excluded_from_macro_auc() {
        let probs = vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.8, 0.1], vec![0.6, 0.3, 0.1]];
        let (auc, excluded) = macro_ovr_auc(&probs, &[0, 1, 0], 3);
        assert_eq!(excluded, vec![2]);
        assert_eq!(auc, Some(1.0));
    }
}
