//! External clustering metrics: accuracy under optimal label matching,
//! normalized mutual information and the adjusted Rand index.

use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix as WeightMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
}

impl MetricReport {
    pub fn compute(pred: &[usize], truth: &[usize]) -> Result<Self> {
        Ok(Self {
            acc: accuracy(pred, truth)?,
            nmi: nmi(pred, truth)?,
            ari: ari(pred, truth)?,
        })
    }
}

fn check(pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("metrics need at least one sample".into()));
    }
    Ok(())
}

/// `rows = pred label`, `cols = truth label`.
pub fn contingency(pred: &[usize], truth: &[usize]) -> Vec<Vec<usize>> {
    let rows = pred.iter().max().map_or(0, |m| m + 1);
    let cols = truth.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; cols]; rows];
    for (&p, &t) in pred.iter().zip(truth) {
        table[p][t] += 1;
    }
    table
}

/// Fraction of samples correctly labelled under the best one-to-one mapping
/// from predicted to true labels (Hungarian assignment on the contingency
/// table).
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check(pred, truth)?;
    let table = contingency(pred, truth);
    let size = table.len().max(table[0].len());
    let mut weights = WeightMatrix::new(size, size, 0i64);
    for (p, row) in table.iter().enumerate() {
        for (t, &c) in row.iter().enumerate() {
            weights[(p, t)] = c as i64;
        }
    }
    let (matched, _) = kuhn_munkres(&weights);
    Ok(matched as f64 / pred.len() as f64)
}

/// Permutation `m` of `0..k` maximizing `|{i : m[pred_i] = reference_i}|`.
/// Labels must lie in `0..k`.
pub fn match_labels(pred: &[usize], reference: &[usize], k: usize) -> Result<Vec<usize>> {
    check(pred, reference)?;
    if let Some(&l) = pred.iter().chain(reference).find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!("label {l} outside 0..{k}")));
    }
    let mut weights = WeightMatrix::new(k, k, 0i64);
    for (&p, &r) in pred.iter().zip(reference) {
        weights[(p, r)] += 1;
    }
    Ok(kuhn_munkres(&weights).1)
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information normalized by the geometric mean of the two
/// entropies; `0` when either labelling is constant.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check(pred, truth)?;
    let n = pred.len() as f64;
    let table = contingency(pred, truth);
    let row_sums: Vec<usize> = table.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<usize> = (0..table[0].len()).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (n * c / (row_sums[i] as f64 * col_sums[j] as f64)).ln();
            }
        }
    }
    let h_pred = entropy(row_sums.iter().copied(), n);
    let h_truth = entropy(col_sums.iter().copied(), n);
    let denom = (h_pred * h_truth).sqrt();
    if denom <= 0.0 {
        return Ok(0.0);
    }
    Ok((mi / denom).clamp(0.0, 1.0))
}

fn comb2(x: usize) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index (Hubert–Arabie). Returns `1` when both labellings
/// are identical trivial partitions, where the index is otherwise 0/0.
pub fn ari(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check(pred, truth)?;
    let table = contingency(pred, truth);
    let sum_cells: f64 = table.iter().flatten().map(|&c| comb2(c)).sum();
    let sum_rows: f64 = table.iter().map(|r| comb2(r.iter().sum())).sum();
    let sum_cols: f64 = (0..table[0].len())
        .map(|j| comb2(table.iter().map(|r| r[j]).sum()))
        .sum();
    let total = comb2(pred.len());
    let expected = if total > 0.0 { sum_rows * sum_cols / total } else { 0.0 };
    let max_index = 0.5 * (sum_rows + sum_cols);
    let denom = max_index - expected;
    if denom == 0.0 {
        return Ok(if sum_cells == max_index { 1.0 } else { 0.0 });
    }
    Ok((sum_cells - expected) / denom)
}
