//! Scalar metrics: MAE, average rank with ties, Pearson correlation.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub fn mae(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::shape(targets.len(), predictions.len()));
    }
    if targets.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / targets.len() as f64)
}

/// Ranks of `scores` (lower is better, rank 1 is best); tied scores share
/// the mean of the ranks they span.
pub fn rank_with_ties(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; scores.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // Positions start..end hold ranks start+1..=end.
        let shared = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = shared;
        }
        start = end;
    }
    ranks
}

/// Mean and population standard deviation of each method's per-task rank.
///
/// `scores[task][method]` is whatever is being ranked (lower is better),
/// keyed by method name.
pub fn average_rank(scores: &BTreeMap<String, BTreeMap<String, f64>>) -> BTreeMap<String, (f64, f64)> {
    let mut per_method: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for by_method in scores.values() {
        let names: Vec<&String> = by_method.keys().collect();
        let values: Vec<f64> = by_method.values().copied().collect();
        for (name, r) in names.into_iter().zip(rank_with_ties(&values)) {
            per_method.entry(name.clone()).or_default().push(r);
        }
    }
    per_method
        .into_iter()
        .map(|(name, ranks)| {
            let n = ranks.len() as f64;
            let mean = ranks.iter().sum::<f64>() / n;
            let var = ranks.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
            (name, (mean, var.sqrt()))
        })
        .collect()
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation);
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}
