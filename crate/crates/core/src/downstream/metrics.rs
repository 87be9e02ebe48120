use crate::error::{config_err, Error, Result};
use std::collections::BTreeSet;

/// Accuracy, AUC and F1 of one evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub auc: f64,
    pub f1: f64,
}

/// Mann–Whitney AUC with mid-ranks for ties: the probability that a random
/// positive scores above a random negative, ties counting one half.
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(config_err!(
            "{} scores for {} labels",
            scores.len(),
            positive.len()
        ));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined(
            "AUC needs both positive and negative samples".into(),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric {
            name: "scores".into(),
            detail: "non-finite score".into(),
        });
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
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| positive[k]).count() as f64 * mid;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

fn f1_for(pred: &[usize], labels: &[usize], class: usize) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &l) in pred.iter().zip(labels) {
        match (p == class, l == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
    }
}

/// F1 of class 1.
pub fn f1_binary(pred: &[usize], labels: &[usize]) -> f64 {
    f1_for(pred, labels, 1)
}

/// Unweighted mean F1 over the classes occurring in labels or predictions.
pub fn macro_f1(pred: &[usize], labels: &[usize]) -> f64 {
    let classes: BTreeSet<usize> = pred.iter().chain(labels).copied().collect();
    if classes.is_empty() {
        return 0.0;
    }
    classes
        .iter()
        .map(|&c| f1_for(pred, labels, c))
        .sum::<f64>()
        / classes.len() as f64
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
        .0
}

/// Metrics from class scores `[N, K]` (row-major) and labels. Binary tasks use
/// the class-1 score for AUC and class-1 F1; multi-class tasks use
/// one-vs-rest macro AUC over the classes present and macro F1.
pub fn metrics(scores: &[f64], k: usize, labels: &[usize]) -> Result<Metrics> {
    let n = labels.len();
    if n == 0 || k < 2 || scores.len() != n * k {
        return Err(config_err!(
            "metrics need N >= 1 rows of K >= 2 scores (N={n}, K={k}, {} scores)",
            scores.len()
        ));
    }
    if labels.iter().any(|&l| l >= k) {
        return Err(config_err!("label out of range for {k} classes"));
    }
    let distinct: BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Undefined(
            "AUC is undefined when every label is the same class".into(),
        ));
    }
    let pred: Vec<usize> = scores.chunks(k).map(argmax).collect();
    let acc = accuracy(&pred, labels);
    let column = |c: usize| scores.chunks(k).map(|r| r[c]).collect::<Vec<f64>>();
    let (auc, f1) = if k == 2 {
        let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        (auc_binary(&column(1), &pos)?, f1_binary(&pred, labels))
    } else {
        let mut total = 0.0;
        for &c in &distinct {
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            total += auc_binary(&column(c), &pos)?;
        }
        (total / distinct.len() as f64, macro_f1(&pred, labels))
    };
    Ok(Metrics {
        accuracy: acc,
        auc,
        f1,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (
        m,
        (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt(),
    )
}

/// Mean/std of each metric over repeats.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunMetrics {
    pub accuracy: (f64, f64),
    pub auc: (f64, f64),
    pub f1: (f64, f64),
    pub repeats: usize,
}

impl RunMetrics {
    pub fn aggregate(runs: &[Metrics]) -> Self {
        let col = |f: fn(&Metrics) -> f64| mean_std(&runs.iter().map(f).collect::<Vec<_>>());
        Self {
            accuracy: col(|m| m.accuracy),
            auc: col(|m| m.auc),
            f1: col(|m| m.f1),
            repeats: runs.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_auc() {
        let auc = auc_binary(&[0.9, 0.8, 0.7, 0.1], &[true, false, true, false]).unwrap();
        assert!((auc - 0.75).abs() < 1e-15);
        // a tie between a positive and a negative counts one half
        let auc = auc_binary(&[0.5, 0.5], &[true, false]).unwrap();
        assert_eq!(auc, 0.5);
        assert!(auc_binary(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn perfect_scores() {
        let scores = [0.9, 0.1, 0.2, 0.8, 0.7, 0.3, 0.1, 0.9];
        let m = metrics(&scores, 2, &[0, 1, 0, 1]).unwrap();
        assert_eq!((m.accuracy, m.auc, m.f1), (1.0, 1.0, 1.0));
        assert!(matches!(
            metrics(&scores, 2, &[1, 1, 1, 1]),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn identical_repeats_have_zero_std() {
        let m = Metrics {
            accuracy: 0.8,
            auc: 0.9,
            f1: 0.7,
        };
        let r = RunMetrics::aggregate(&[m; 5]);
        assert_eq!((r.accuracy.1, r.auc.1, r.f1.1), (0.0, 0.0, 0.0));
    }
}
