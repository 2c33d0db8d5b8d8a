//! Classification metrics and uncertainty histograms.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Prediction;

fn truth_pairs(preds: &[Prediction]) -> Result<Vec<(usize, usize)>> {
    if preds.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    preds
        .iter()
        .map(|p| {
            p.true_label
                .map(|t| (t, p.predicted_class))
                .ok_or_else(|| Error::Data(format!("prediction {} has no ground truth", p.sample_id)))
        })
        .collect()
}

fn is_correct(p: &Prediction) -> Result<bool> {
    match (p.correct, p.true_label) {
        (Some(c), _) => Ok(c),
        (None, Some(t)) => Ok(t == p.predicted_class),
        (None, None) => Err(Error::Data(format!("prediction {} has no ground truth", p.sample_id))),
    }
}

pub fn accuracy(preds: &[Prediction]) -> Result<f64> {
    let pairs = truth_pairs(preds)?;
    Ok(accuracy_from_labels(&pairs))
}

fn accuracy_from_labels(pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().filter(|(t, p)| t == p).count() as f64 / pairs.len() as f64
}

/// Support-weighted mean of per-class F1 over predictions with ground truth.
pub fn weighted_f1(preds: &[Prediction]) -> Result<f64> {
    let pairs = truth_pairs(preds)?;
    let (truth, predicted): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
    weighted_f1_from_labels(&truth, &predicted)
}

/// Weighted F1 on raw label sequences. A class with no predicted positives
/// has precision 0; a class with `P + R = 0` has F1 0.
pub fn weighted_f1_from_labels(truth: &[usize], predicted: &[usize]) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::Empty("labels"));
    }
    if truth.len() != predicted.len() {
        return Err(Error::Dimension { expected: truth.len(), got: predicted.len() });
    }
    let k = truth.iter().chain(predicted).max().map_or(0, |m| m + 1);
    let mut tp = vec![0usize; k];
    let mut pred_pos = vec![0usize; k];
    let mut support = vec![0usize; k];
    for (&t, &p) in truth.iter().zip(predicted) {
        support[t] += 1;
        pred_pos[p] += 1;
        if t == p {
            tp[t] += 1;
        }
    }
    let n = truth.len() as f64;
    let mut total = 0.0;
    for c in 0..k {
        if support[c] == 0 {
            continue;
        }
        let precision = if pred_pos[c] == 0 { 0.0 } else { tp[c] as f64 / pred_pos[c] as f64 };
        let recall = tp[c] as f64 / support[c] as f64;
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        total += f1 * support[c] as f64 / n;
    }
    Ok(total)
}

/// Area under the ROC curve as the Mann-Whitney statistic: the fraction of
/// (positive, negative) pairs ranked correctly, ties counting one half.
pub fn binary_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension { expected: scores.len(), got: labels.len() });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data("AUC needs at least one positive and one negative".into()));
    }
    // Sort once and use midranks: U = Σ rank(pos) - n_pos (n_pos + 1) / 2.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * order[i..=j].iter().filter(|&&o| labels[o]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Uncertainty histograms of correct and incorrect predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramPair {
    pub bin_edges: Vec<f64>,
    pub counts_correct: Vec<u64>,
    pub counts_incorrect: Vec<u64>,
}

pub const DEFAULT_HISTOGRAM_BINS: usize = 20;

/// Bins `u` on uniform edges over `[0, 1]`; bins are left-closed and the
/// last bin also includes 1.
pub fn uncertainty_histograms(preds: &[Prediction], num_bins: usize) -> Result<HistogramPair> {
    if preds.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    if num_bins < 2 {
        return Err(Error::Config("histograms need at least 2 bins".into()));
    }
    let bin_edges: Vec<f64> = (0..=num_bins).map(|i| i as f64 / num_bins as f64).collect();
    let mut counts_correct = vec![0; num_bins];
    let mut counts_incorrect = vec![0; num_bins];
    for p in preds {
        let u = p.uncertainty().clamp(0.0, 1.0);
        let bin = ((u * num_bins as f64) as usize).min(num_bins - 1);
        if is_correct(p)? {
            counts_correct[bin] += 1;
        } else {
            counts_incorrect[bin] += 1;
        }
    }
    Ok(HistogramPair { bin_edges, counts_correct, counts_incorrect })
}

pub fn save_histograms(h: &HistogramPair, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(h)?)?;
    Ok(())
}

pub fn load_histograms(path: &Path) -> Result<HistogramPair> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Mean uncertainty of correct and incorrect predictions. A side with no
/// members is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySeparation {
    pub mean_u_correct: Option<f64>,
    pub mean_u_incorrect: Option<f64>,
}

impl UncertaintySeparation {
    pub fn is_complete(&self) -> bool {
        self.mean_u_correct.is_some() && self.mean_u_incorrect.is_some()
    }

    /// `mean_u_incorrect - mean_u_correct` when both sides exist.
    pub fn gap(&self) -> Option<f64> {
        Some(self.mean_u_incorrect? - self.mean_u_correct?)
    }
}

pub fn uncertainty_separation(preds: &[Prediction]) -> Result<UncertaintySeparation> {
    if preds.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    let (mut sc, mut nc, mut si, mut ni) = (0.0, 0usize, 0.0, 0usize);
    for p in preds {
        if is_correct(p)? {
            sc += p.uncertainty();
            nc += 1;
        } else {
            si += p.uncertainty();
            ni += 1;
        }
    }
    let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
    Ok(UncertaintySeparation { mean_u_correct: mean(sc, nc), mean_u_incorrect: mean(si, ni) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evidential::opinion_from_alpha;

    /// A prediction whose uncertainty is exactly `u` (K = 2).
    fn pred(id: usize, truth: usize, predicted: usize, u: f64) -> Prediction {
        let s = 2.0 / u;
        let alpha = if predicted == 0 { vec![s - 1.0, 1.0] } else { vec![1.0, s - 1.0] };
        Prediction {
            sample_id: id,
            opinion: opinion_from_alpha(alpha),
            predicted_class: predicted,
            true_label: Some(truth),
            correct: Some(truth == predicted),
        }
    }

    #[test]
    fn accuracy_examples() {
        let all: Vec<_> = (0..4).map(|i| pred(i, 1, 1, 0.5)).collect();
        assert_eq!(accuracy(&all).unwrap(), 1.0);
        let none: Vec<_> = (0..4).map(|i| pred(i, 0, 1, 0.5)).collect();
        assert_eq!(accuracy(&none).unwrap(), 0.0);
        let mut mixed = all.clone();
        mixed[2] = pred(2, 0, 1, 0.5);
        assert_eq!(accuracy(&mixed).unwrap(), 0.75);
        assert!(accuracy(&[]).is_err());
    }

    #[test]
    fn weighted_f1_examples() {
        assert_eq!(weighted_f1_from_labels(&[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap(), 1.0);
        let f = weighted_f1_from_labels(&[0, 0, 0, 1, 1, 1], &[0, 0, 1, 1, 1, 1]).unwrap();
        assert!((f - (0.5 * 0.8 + 0.5 * 6.0 / 7.0)).abs() < 1e-12);
        // class 1 absent from truth and predictions contributes nothing
        let f = weighted_f1_from_labels(&[0, 0, 2, 2], &[0, 0, 2, 2]).unwrap();
        assert_eq!(f, 1.0);
        assert!(weighted_f1_from_labels(&[], &[]).is_err());
    }

    #[test]
    fn auc_examples() {
        let auc = binary_auc(&[0.9, 0.8, 0.7, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(auc, 1.0);
        let auc = binary_auc(&[0.9, 0.4, 0.6, 0.2], &[true, true, false, false]).unwrap();
        assert_eq!(auc, 0.75);
        let auc = binary_auc(&[0.3; 5], &[true, false, true, false, false]).unwrap();
        assert_eq!(auc, 0.5);
        assert!(binary_auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn histogram_boundaries() {
        let zeros: Vec<_> = (0..5).map(|i| pred(i, 0, 0, 1e-300)).collect();
        let h = uncertainty_histograms(&zeros, 20).unwrap();
        assert_eq!(h.counts_correct[0], 5);
        assert_eq!(h.bin_edges.len(), 21);
        assert_eq!((h.bin_edges[0], h.bin_edges[20]), (0.0, 1.0));

        let ones = vec![pred(0, 0, 0, 1.0), pred(1, 1, 0, 1.0)];
        let h = uncertainty_histograms(&ones, 4).unwrap();
        assert_eq!(h.counts_correct[3], 1);
        assert_eq!(h.counts_incorrect[3], 1);

        let mixed: Vec<_> = (0..37).map(|i| pred(i, i % 2, 0, (i as f64 + 0.5) / 40.0)).collect();
        let h = uncertainty_histograms(&mixed, 7).unwrap();
        let total: u64 = h.counts_correct.iter().chain(&h.counts_incorrect).sum();
        assert_eq!(total, 37);
        assert!(uncertainty_histograms(&mixed, 1).is_err());
        assert!(uncertainty_histograms(&[], 5).is_err());
    }

    #[test]
    fn separation_examples() {
        let s = uncertainty_separation(&[pred(0, 0, 0, 0.1), pred(1, 1, 0, 0.9)]).unwrap();
        assert!((s.mean_u_correct.unwrap() - 0.1).abs() < 1e-12);
        assert!((s.mean_u_incorrect.unwrap() - 0.9).abs() < 1e-12);
        let s = uncertainty_separation(&[pred(0, 0, 0, 0.4), pred(1, 1, 0, 0.4)]).unwrap();
        assert!((s.gap().unwrap()).abs() < 1e-12);
        let s = uncertainty_separation(&[pred(0, 0, 0, 0.4)]).unwrap();
        assert!(!s.is_complete());
        assert_eq!(s.mean_u_incorrect, None);
    }
}
