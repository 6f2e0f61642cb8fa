//! Ranking metrics, accuracy and seed aggregation.

use serde::Serialize;

/// Area under the ROC curve as the probability that a random positive
/// outscores a random negative, ties counting half. `None` unless both
/// classes are present.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n = scores.len();
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = n - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean.
        let mid = (i + j + 2) as f64 / 2.0;
        let hits = order[i..=j].iter().filter(|&&o| labels[o]).count();
        rank_sum += mid * hits as f64;
        i = j + 1;
    }
    let (p, q) = (pos as f64, neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Average precision: the mean over positives of the precision at the
/// threshold equal to that positive's score. `None` without positives.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n = scores.len();
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut total) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let hits = order[i..=j].iter().filter(|&&o| labels[o]).count();
        tp += hits;
        seen += j - i + 1;
        total += hits as f64 * tp as f64 / seen as f64;
        i = j + 1;
    }
    Some(total / pos as f64)
}

/// Unweighted mean of the defined values.
pub fn macro_average(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Index of the largest entry (first on ties).
pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub per_class_auroc: Vec<Option<f64>>,
    pub per_class_auprc: Vec<Option<f64>>,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub accuracy: Option<f64>,
}

impl MetricsReport {
    /// Single-label classification from probability rows. Two-class problems
    /// are scored on class 1; more classes are averaged one-vs-rest.
    pub fn multiclass(probs: &[Vec<f64>], labels: &[usize]) -> Self {
        let c = probs.first().map_or(0, Vec::len);
        let correct = probs.iter().zip(labels).filter(|(p, &y)| argmax(p) == y).count();
        let accuracy = (!labels.is_empty()).then(|| correct as f64 / labels.len() as f64);
        let classes: Vec<usize> = if c == 2 { vec![1] } else { (0..c).collect() };
        let mut per_auroc = Vec::new();
        let mut per_auprc = Vec::new();
        for &cl in &classes {
            let scores: Vec<f64> = probs.iter().map(|p| p[cl]).collect();
            let ys: Vec<bool> = labels.iter().map(|&y| y == cl).collect();
            per_auroc.push(auroc(&scores, &ys));
            per_auprc.push(auprc(&scores, &ys));
        }
        Self {
            auroc: macro_average(&per_auroc),
            auprc: macro_average(&per_auprc),
            per_class_auroc: per_auroc,
            per_class_auprc: per_auprc,
            accuracy,
        }
    }

    /// Independent binary labels; accuracy is per label at 0.5.
    pub fn multilabel(probs: &[Vec<f64>], labels: &[Vec<bool>]) -> Self {
        let c = probs.first().map_or(0, Vec::len);
        let mut per_auroc = Vec::with_capacity(c);
        let mut per_auprc = Vec::with_capacity(c);
        for cl in 0..c {
            let scores: Vec<f64> = probs.iter().map(|p| p[cl]).collect();
            let ys: Vec<bool> = labels.iter().map(|y| y[cl]).collect();
            per_auroc.push(auroc(&scores, &ys));
            per_auprc.push(auprc(&scores, &ys));
        }
        let total = probs.len() * c;
        let correct = probs
            .iter()
            .zip(labels)
            .flat_map(|(p, y)| p.iter().zip(y))
            .filter(|(&p, &y)| (p >= 0.5) == y)
            .count();
        Self {
            auroc: macro_average(&per_auroc),
            auprc: macro_average(&per_auprc),
            per_class_auroc: per_auroc,
            per_class_auprc: per_auprc,
            accuracy: (total > 0).then(|| correct as f64 / total as f64),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]), Some(1.0));
        assert_eq!(auroc(&[0.5; 4], &[false, true, false, true]), Some(0.5));
        assert_eq!(auroc(&[0.1, 0.2], &[true, true]), None);
    }

    #[test]
    fn auprc_examples() {
        assert_eq!(auprc(&[0.9, 0.8, 0.1], &[true, true, false]), Some(1.0));
        assert_eq!(auprc(&[0.9, 0.8, 0.7, 0.1], &[false, false, false, true]), Some(0.25));
        assert_eq!(auprc(&[0.3], &[false]), None);
    }

    #[test]
    fn macro_and_seed_stats() {
        assert_eq!(macro_average(&[Some(0.6), None, Some(0.8)]), Some(0.7));
        assert_eq!(macro_average(&[Some(0.6)]), Some(0.6));
        assert_eq!(macro_average(&[None]), None);
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }

    #[test]
    fn binary_reports_positive_class() {
        let probs = vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.6, 0.4]];
        let r = MetricsReport::multiclass(&probs, &[0, 1, 1]);
        assert_eq!(r.per_class_auroc.len(), 1);
        assert_eq!(r.auroc, Some(1.0));
        assert_eq!(r.accuracy, Some(2.0 / 3.0));
    }
}
