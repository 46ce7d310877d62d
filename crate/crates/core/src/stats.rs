//! Binary classification metrics and population stability.

use serde::{Deserialize, Serialize};

use crate::num::Scalar;

/// ROC AUC by the Mann-Whitney rank statistic; tied scores count one half.
/// `None` unless both classes are present.
pub fn auc<T: Scalar>(scores: &[T], labels: &[bool]) -> Option<T> {
    assert_eq!(
        scores.len(),
        labels.len(),
        "scores and labels differ in length"
    );
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .expect("scores must not be NaN")
    });
    // Ranks are doubled so ties stay integral: two times the average rank.
    let mut pos_rank2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let rank2 = (i + 1 + j + 1) as u128;
        for &k in &order[i..=j] {
            if labels[k] {
                pos_rank2 += rank2;
            }
        }
        i = j + 1;
    }
    let np = n_pos as u128;
    let u2 = pos_rank2 - np * (np + 1);
    Some(T::of_usize(u2 as usize) / T::lit(2.0) / (T::of_usize(n_pos) * T::of_usize(n_neg)))
}

/// Mean squared error of probabilities against 0/1 outcomes.
pub fn brier<T: Scalar>(probs: &[T], labels: &[bool]) -> Option<T> {
    assert_eq!(
        probs.len(),
        labels.len(),
        "probabilities and labels differ in length"
    );
    if probs.is_empty() {
        return None;
    }
    let sum: T = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let d = p - if y { T::one() } else { T::zero() };
            d * d
        })
        .sum();
    Some(sum / T::of_usize(probs.len()))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    /// Scores at or above `threshold` predict the positive class.
    pub fn at<T: Scalar>(scores: &[T], labels: &[bool], threshold: T) -> Self {
        let mut c = Confusion::default();
        for (&s, &y) in scores.iter().zip(labels) {
            match (s >= threshold, y) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    fn ratio<T: Scalar>(num: usize, den: usize) -> Option<T> {
        (den > 0).then(|| T::of_usize(num) / T::of_usize(den))
    }

    pub fn accuracy<T: Scalar>(&self) -> Option<T> {
        Self::ratio(self.tp + self.tn, self.total())
    }

    /// True positive rate.
    pub fn sensitivity<T: Scalar>(&self) -> Option<T> {
        Self::ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity<T: Scalar>(&self) -> Option<T> {
        Self::ratio(self.tn, self.tn + self.fp)
    }

    pub fn false_positive_rate<T: Scalar>(&self) -> Option<T> {
        Self::ratio(self.fp, self.tn + self.fp)
    }

    pub fn positive_rate<T: Scalar>(&self) -> Option<T> {
        Self::ratio(self.tp + self.fp, self.total())
    }
}

pub const PSI_BINS: usize = 10;
pub const PSI_EPSILON: f64 = 1e-4;

/// Population stability index between two binned distributions given as
/// proportions. Empty bins are floored at [`PSI_EPSILON`].
pub fn psi<T: Scalar>(reference: &[T], current: &[T]) -> T {
    assert_eq!(reference.len(), current.len(), "bin counts differ");
    let eps = T::lit(PSI_EPSILON);
    reference
        .iter()
        .zip(current)
        .map(|(&a, &b)| {
            let a = a.max(eps);
            let b = b.max(eps);
            (b - a) * (b / a).ln()
        })
        .sum()
}

/// Interior bin edges at the reference sample's equal-frequency quantiles.
/// Duplicate edges (from tied values) are merged, so fewer bins may result.
pub fn quantile_edges<T: Scalar>(reference: &[T], bins: usize) -> Vec<T> {
    let mut sorted = reference.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("values must not be NaN"));
    let n = sorted.len();
    let mut edges: Vec<T> = Vec::new();
    if n == 0 {
        return edges;
    }
    for k in 1..bins {
        let e = sorted[(k * n / bins).min(n - 1)];
        if edges.last() != Some(&e) && e > sorted[0] {
            edges.push(e);
        }
    }
    edges
}

/// Proportion of `values` in each bin delimited by `edges`; bin `i` holds
/// values in `[edges[i-1], edges[i])`.
pub fn bin_proportions<T: Scalar>(values: &[T], edges: &[T]) -> Vec<T> {
    let mut counts = vec![0usize; edges.len() + 1];
    for v in values {
        counts[edges.partition_point(|e| e <= v)] += 1;
    }
    let n = T::of_usize(values.len().max(1));
    counts.into_iter().map(|c| T::of_usize(c) / n).collect()
}

/// PSI of `current` against `reference` using equal-frequency reference bins.
pub fn psi_samples<T: Scalar>(reference: &[T], current: &[T], bins: usize) -> Option<T> {
    if reference.is_empty() || current.is_empty() {
        return None;
    }
    let edges = quantile_edges(reference, bins);
    Some(psi(
        &bin_proportions(reference, &edges),
        &bin_proportions(current, &edges),
    ))
}
