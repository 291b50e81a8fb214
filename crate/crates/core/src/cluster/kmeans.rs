use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
#[cfg_attr(not(feature = "parallel"), allow(unused_imports))]
use crate::par::{self, prelude::*};

pub const DEFAULT_MAX_ITER: usize = 300;
pub const DEFAULT_RESTARTS: usize = 10;
const SHIFT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringResult {
    pub labels: Vec<usize>,
    /// `K × D`
    pub centers: Array2<f64>,
    /// Sum of squared distances to the assigned centers.
    pub inertia: f64,
    pub iterations: usize,
}

/// Lloyd's algorithm from a k-means++ start.
///
/// Stops when no center moves by more than `1e-6` or after `max_iter`
/// updates. A cluster that empties out is re-seeded with the point farthest
/// from its current center, so every returned cluster has members.
pub fn kmeans(z: &Array2<f64>, k: usize, seed: u64, max_iter: usize) -> Result<ClusteringResult> {
    let n = z.nrows();
    if k == 0 || n < k {
        return Err(Error::InvalidArgument(format!(
            "k-means needs n >= K >= 1, got n={n} K={k}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus_init(z, k, &mut rng);
    let (mut labels, mut dists) = assign(z, &centers);
    let mut inertia: f64 = dists.iter().sum();
    let mut iterations = 0;

    for _ in 0..max_iter {
        iterations += 1;
        repair_empty(k, &mut labels, &mut dists);
        let updated = means(z, &labels, k);
        let shift = updated
            .outer_iter()
            .zip(centers.outer_iter())
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centers = updated;
        let (l, d) = assign(z, &centers);
        let next: f64 = d.iter().sum();
        debug_assert!(
            next <= inertia + 1e-9 * (1.0 + inertia),
            "inertia rose from {inertia} to {next}"
        );
        labels = l;
        dists = d;
        inertia = next;
        if shift < SHIFT_TOL {
            break;
        }
    }

    if (0..k).any(|c| !labels.contains(&c)) {
        repair_empty(k, &mut labels, &mut dists);
        centers = means(z, &labels, k);
        inertia = z
            .outer_iter()
            .zip(&labels)
            .map(|(row, &c)| sq_dist(row, centers.row(c)))
            .sum();
    }

    Ok(ClusteringResult {
        labels,
        centers,
        inertia,
        iterations,
    })
}

/// Best of `restarts` independent [`kmeans`] runs by inertia. Restarts run
/// concurrently when the `parallel` feature is on; ties go to the lowest
/// restart index.
pub fn kmeans_best_of(
    z: &Array2<f64>,
    k: usize,
    seed: u64,
    restarts: usize,
    max_iter: usize,
) -> Result<ClusteringResult> {
    let restarts = restarts.max(1);
    let runs: Vec<Result<ClusteringResult>> = par::range(restarts)
        .map(|r| kmeans(z, k, restart_seed(seed, r), max_iter))
        .collect();
    let mut best: Option<ClusteringResult> = None;
    for run in runs {
        let run = run?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn restart_seed(seed: u64, r: usize) -> u64 {
    // splitmix64 step
    let mut x = seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(r as u64 + 1));
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn plus_plus_init(z: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = z.nrows();
    let mut centers = Array2::zeros((k, z.ncols()));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&z.row(first));
    let mut closest: Vec<f64> = z.outer_iter().map(|r| sq_dist(r, z.row(first))).collect();
    for c in 1..k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in closest.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).assign(&z.row(pick));
        for (i, row) in z.outer_iter().enumerate() {
            closest[i] = closest[i].min(sq_dist(row, z.row(pick)));
        }
    }
    centers
}

fn assign(z: &Array2<f64>, centers: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
    let pairs: Vec<(usize, f64)> = par::range(z.nrows())
        .map(|i| {
            let row = z.row(i);
            let mut best = (0, f64::INFINITY);
            for (c, center) in centers.outer_iter().enumerate() {
                let d = sq_dist(row, center);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .collect();
    pairs.into_iter().unzip()
}

fn repair_empty(k: usize, labels: &mut [usize], dists: &mut [f64]) {
    let mut sizes = vec![0usize; k];
    for &l in labels.iter() {
        sizes[l] += 1;
    }
    for c in 0..k {
        if sizes[c] > 0 {
            continue;
        }
        let donor = (0..labels.len())
            .filter(|&i| sizes[labels[i]] > 1)
            .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
        if let Some(i) = donor {
            sizes[labels[i]] -= 1;
            labels[i] = c;
            sizes[c] = 1;
            dists[i] = 0.0;
        }
    }
}

fn means(z: &Array2<f64>, labels: &[usize], k: usize) -> Array2<f64> {
    let mut sums = Array2::<f64>::zeros((k, z.ncols()));
    let mut counts = vec![0usize; k];
    for (row, &l) in z.outer_iter().zip(labels) {
        let mut acc = sums.row_mut(l);
        acc += &row;
        counts[l] += 1;
    }
    for (mut row, &c) in sums.outer_iter_mut().zip(&counts) {
        if c > 0 {
            row /= c as f64;
        }
    }
    sums
}
