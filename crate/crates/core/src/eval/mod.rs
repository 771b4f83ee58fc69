//! Evaluation protocol: stratified repeated splits, metrics, aggregation and
//! paired significance.

mod benchmark;
mod probe;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};

pub use probe::{linear_probe_auroc, LinearProbe};
pub use benchmark::{
    compare_reports, read_labels_csv, run_benchmark, write_table_csv, MetricSummary, MetricsReport,
    Protocol, SplitMetrics, TaskConfig,
};

pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.6, 0.2, 0.2);
pub const MIN_CLASS_COUNT: usize = 5;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SplitSpec {
    pub split_id: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub ratios: (f64, f64, f64),
    pub seed: u64,
}

impl SplitSpec {
    pub fn all_ids(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

fn check_ratios(r: (f64, f64, f64)) -> Result<()> {
    let ok = [r.0, r.1, r.2].iter().all(|x| *x > 0.0) && ((r.0 + r.1 + r.2) - 1.0).abs() < 1e-9;
    if !ok {
        return Err(Error::invalid(format!("split ratios {r:?} must be positive and sum to 1")));
    }
    Ok(())
}

/// One stratified split. Per class with `n_c` members: `round(r_val·n_c)` go
/// to validation, `round(r_test·n_c)` to test, the rest to train.
pub fn stratified_split(
    labels: &BTreeMap<String, usize>,
    ratios: (f64, f64, f64),
    seed: u64,
    split_id: usize,
) -> Result<SplitSpec> {
    check_ratios(ratios)?;
    let mut by_class: BTreeMap<usize, Vec<&String>> = BTreeMap::new();
    for (id, &c) in labels {
        by_class.entry(c).or_default().push(id);
    }
    if by_class.len() < 2 {
        return Err(Error::invalid("stratification needs at least 2 classes"));
    }
    if let Some((c, ids)) = by_class.iter().find(|(_, ids)| ids.len() < MIN_CLASS_COUNT) {
        return Err(Error::invalid(format!(
            "class {c} has {} members; at least {MIN_CLASS_COUNT} needed to stratify",
            ids.len()
        )));
    }
    let mut spec = SplitSpec {
        split_id,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        ratios,
        seed,
    };
    for (&c, ids) in &by_class {
        let mut ids = ids.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[split_id as u64, c as u64]));
        ids.shuffle(&mut rng);
        let n = ids.len() as f64;
        let n_val = (ratios.1 * n).round() as usize;
        let n_test = (ratios.2 * n).round() as usize;
        let (val, rest) = ids.split_at(n_val);
        let (test, train) = rest.split_at(n_test);
        spec.val.extend(val.iter().map(|s| s.to_string()));
        spec.test.extend(test.iter().map(|s| s.to_string()));
        spec.train.extend(train.iter().map(|s| s.to_string()));
    }
    spec.train.sort();
    spec.val.sort();
    spec.test.sort();
    Ok(spec)
}

/// `n_repeats` stratified splits; split `i` depends only on `(seed, i)`.
pub fn stratified_splits(
    labels: &BTreeMap<String, usize>,
    ratios: (f64, f64, f64),
    n_repeats: usize,
    seed: u64,
) -> Result<Vec<SplitSpec>> {
    (0..n_repeats)
        .map(|i| stratified_split(labels, ratios, seed, i))
        .collect()
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{a} predictions for {b} labels")));
    }
    if a == 0 {
        return Err(Error::invalid("empty input"));
    }
    Ok(())
}

/// Binary accuracy: positive iff `score ≥ t`.
pub fn accuracy_at_threshold(scores: &[f64], labels: &[usize], t: f64) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &y)| usize::from(s >= t) == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Multiclass accuracy with argmax prediction (lowest index wins ties).
pub fn accuracy_argmax(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_lengths(probs.len(), labels.len())?;
    let correct = probs
        .iter()
        .zip(labels)
        .filter(|(p, &y)| argmax(p) == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

/// Threshold accuracy on `p[1]` for two-column probabilities, argmax otherwise.
pub fn accuracy(probs: &[Vec<f64>], labels: &[usize], t: f64) -> Result<f64> {
    if probs.first().is_some_and(|p| p.len() == 2) {
        let s: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        accuracy_at_threshold(&s, labels, t)
    } else {
        accuracy_argmax(probs, labels)
    }
}

/// Mann–Whitney AUROC with half credit for ties, from integer win/tie counts.
pub fn auroc_binary(scores: &[f64], labels: &[usize]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score".into()));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::invalid("binary labels must be 0 or 1"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut wins, mut ties) = (0u128, 0u128);
    let (mut neg_below, mut n_pos, mut n_neg) = (0u128, 0u128, 0u128);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut gp, mut gn) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                gp += 1;
            } else {
                gn += 1;
            }
            j += 1;
        }
        wins += gp * neg_below;
        ties += gp * gn;
        neg_below += gn;
        n_pos += gp;
        n_neg += gn;
        i = j;
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("AUROC needs both classes"));
    }
    Ok(auroc_from_counts(wins, ties, n_pos * n_neg))
}

/// `(wins + ties/2) / pairs`, evaluated the same way by every caller so
/// equal counts give equal floats.
pub fn auroc_from_counts(wins: u128, ties: u128, pairs: u128) -> f64 {
    (2 * wins + ties) as f64 / (2 * pairs) as f64
}

/// Micro-averaged AUROC: all one-vs-rest indicators flattened into one binary
/// problem.
pub fn auroc_micro(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_lengths(probs.len(), labels.len())?;
    let c = probs[0].len();
    if c < 2 {
        return Err(Error::invalid("need at least 2 probability columns"));
    }
    for p in probs {
        if p.len() != c {
            return Err(Error::shape("ragged probability matrix"));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-4 {
            return Err(Error::invalid(format!("probability row sums to {s}")));
        }
    }
    if labels.iter().any(|&y| y >= c) {
        return Err(Error::invalid("label outside probability columns"));
    }
    if labels.iter().collect::<BTreeSet<_>>().len() < 2 {
        return Err(Error::invalid("micro AUROC needs at least 2 classes present"));
    }
    let mut scores = Vec::with_capacity(probs.len() * c);
    let mut ind = Vec::with_capacity(probs.len() * c);
    for (p, &y) in probs.iter().zip(labels) {
        for (k, &v) in p.iter().enumerate() {
            scores.push(v);
            ind.push(usize::from(k == y));
        }
    }
    auroc_binary(&scores, &ind)
}

/// Mean and population standard deviation.
pub fn aggregate_runs(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::invalid("no runs to aggregate"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// `"0.930 ± 0.05"`.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.3} ± {std:.2}")
}

fn paired_diffs(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("paired vectors have lengths {} and {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::invalid("paired test needs at least 2 splits"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
}

fn flip_tolerance(d: &[f64]) -> f64 {
    1e-12 * d.iter().map(|x| x.abs()).sum::<f64>()
}

/// Two-sided paired sign-flip permutation test on the mean difference;
/// `p = (1 + #{|T*| ≥ |T|}) / (1 + n_perm)`.
pub fn paired_significance(a: &[f64], b: &[f64], n_perm: usize, seed: u64) -> Result<f64> {
    let d = paired_diffs(a, b)?;
    if n_perm == 0 {
        return Err(Error::invalid("n_perm must be positive"));
    }
    let observed = d.iter().sum::<f64>().abs();
    let tol = flip_tolerance(&d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut count = 0usize;
    for _ in 0..n_perm {
        let t: f64 = d
            .iter()
            .map(|x| if rng.random_bool(0.5) { *x } else { -*x })
            .sum();
        if t.abs() >= observed - tol {
            count += 1;
        }
    }
    Ok((1 + count) as f64 / (1 + n_perm) as f64)
}

/// Exact sign-flip p-value over all `2^n` sign vectors (n ≤ 24).
pub fn paired_significance_exact(a: &[f64], b: &[f64]) -> Result<f64> {
    let d = paired_diffs(a, b)?;
    if d.len() > 24 {
        return Err(Error::invalid("exact enumeration limited to 24 pairs"));
    }
    let observed = d.iter().sum::<f64>().abs();
    let tol = flip_tolerance(&d);
    let total = 1u64 << d.len();
    let count = (0..total)
        .filter(|mask| {
            let t: f64 = d
                .iter()
                .enumerate()
                .map(|(i, x)| if mask >> i & 1 == 1 { -*x } else { *x })
                .sum();
            t.abs() >= observed - tol
        })
        .count();
    Ok(count as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc_binary(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(auroc_binary(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auroc_binary(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert!(auroc_binary(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn micro_examples() {
        let eye = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        assert_eq!(auroc_micro(&eye, &[0, 1, 2]).unwrap(), 1.0);
        let uni = vec![vec![0.25; 4]; 5];
        assert_eq!(auroc_micro(&uni, &[0, 1, 2, 3, 0]).unwrap(), 0.5);
        assert!(auroc_micro(&[vec![0.5, 0.6]], &[0]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy_at_threshold(&[0.9, 0.1], &[1, 0], 0.5).unwrap(), 1.0);
        assert_eq!(accuracy_at_threshold(&[0.5], &[1], 0.5).unwrap(), 1.0);
        assert!(accuracy_at_threshold(&[0.5], &[1, 0], 0.5).is_err());
        assert!(accuracy_at_threshold(&[], &[], 0.5).is_err());
        assert_eq!(
            accuracy_argmax(&[vec![0.2, 0.5, 0.3], vec![0.6, 0.2, 0.2]], &[1, 2]).unwrap(),
            0.5
        );
    }

    #[test]
    fn aggregation() {
        let (m, s) = aggregate_runs(&[0.9, 0.9, 0.9]).unwrap();
        assert!((m - 0.9).abs() < 1e-15 && s < 1e-15);
        let (m, s) = aggregate_runs(&[0.8, 1.0]).unwrap();
        assert!((m - 0.9).abs() < 1e-12 && (s - 0.1).abs() < 1e-12);
        assert_eq!(format_mean_std(0.93, 0.05), "0.930 ± 0.05");
        assert!(aggregate_runs(&[]).is_err());
    }

    #[test]
    fn balanced_split_counts() {
        let labels: BTreeMap<String, usize> = (0..100).map(|i| (format!("im{i:03}"), i % 2)).collect();
        let s = stratified_split(&labels, DEFAULT_RATIOS, 4, 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (60, 20, 20));
        for part in [&s.train, &s.val, &s.test] {
            let pos = part.iter().filter(|id| labels[*id] == 1).count();
            assert_eq!(pos * 2, part.len());
        }
        let small: BTreeMap<String, usize> = (0..13).map(|i| (format!("{i}"), usize::from(i < 3))).collect();
        assert!(stratified_split(&small, DEFAULT_RATIOS, 0, 0).is_err());
    }

    #[test]
    fn significance_edges() {
        let a = vec![0.7, 0.8, 0.9];
        assert_eq!(paired_significance(&a, &a, 1000, 1).unwrap(), 1.0);
        assert_eq!(paired_significance_exact(&a, &a).unwrap(), 1.0);
        assert!(paired_significance(&a, &a[..2], 10, 1).is_err());
        assert!(paired_significance(&a[..1], &a[..1], 10, 1).is_err());
    }
}
