//! Gaussian-mixture multi-view fixture.
//!
//! Samples share a latent point drawn from one of `K` isotropic Gaussian
//! clusters. Each view is an independent random linear projection of that
//! latent plus view-private jitter, standardized per feature.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::MultiViewDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub k: usize,
    pub dims: Vec<usize>,
    /// Distance of every cluster mean from the origin; means are mutually
    /// orthogonal when `k <= latent_dim`.
    pub separation: f64,
    pub seed: u64,
    /// Dimension of the shared latent space.
    pub latent_dim: usize,
    /// Isotropic per-view noise added after projection, relative to the
    /// unit within-cluster spread.
    pub jitter: f64,
    /// Scale of a view-private Gaussian factor that carries no cluster
    /// information. Zero disables it.
    pub private_std: f64,
}

impl SyntheticSpec {
    pub fn new(n: usize, k: usize, dims: Vec<usize>, separation: f64, seed: u64) -> Self {
        Self {
            n,
            k,
            dims,
            separation,
            seed,
            latent_dim: 8,
            jitter: 0.5,
            private_std: 0.0,
        }
    }

    pub fn generate(&self) -> Result<MultiViewDataset> {
        if self.k < 2 || self.n < self.k {
            return Err(Error::InvalidArgument(format!(
                "need N >= K >= 2, got N={} K={}",
                self.n, self.k
            )));
        }
        if self.dims.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least two views, got {}",
                self.dims.len()
            )));
        }
        if self.dims.contains(&0) || self.latent_dim == 0 {
            return Err(Error::InvalidArgument("dimensions must be positive".into()));
        }
        if !(self.separation >= 0.0) || !(self.jitter >= 0.0) || !(self.private_std >= 0.0) {
            return Err(Error::InvalidArgument(
                "separation, jitter and private_std must be non-negative".into(),
            ));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let r = self.latent_dim;
        let means = cluster_means(self.k, r, self.separation, &mut rng);

        let mut labels: Vec<usize> = (0..self.n).map(|i| i % self.k).collect();
        labels.shuffle(&mut rng);

        let mut shared = Array2::<f64>::zeros((self.n, r));
        for (i, mut row) in shared.outer_iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                let e: f64 = rng.sample(StandardNormal);
                *x = means[[labels[i], j]] + e;
            }
        }

        let views = self
            .dims
            .iter()
            .map(|&d| {
                let proj = gaussian(&mut rng, (r, d), 1.0 / (r as f64).sqrt());
                let mut x = shared.dot(&proj);
                if self.private_std > 0.0 {
                    let private = gaussian(&mut rng, (self.n, r), self.private_std);
                    let private_proj = gaussian(&mut rng, (r, d), 1.0 / (r as f64).sqrt());
                    x += &private.dot(&private_proj);
                }
                x += &gaussian(&mut rng, (self.n, d), self.jitter);
                standardize(&mut x);
                x
            })
            .collect();

        MultiViewDataset::new(format!("synthetic-k{}-n{}", self.k, self.n), views, Some(labels))
    }
}

/// Convenience wrapper over [`SyntheticSpec`] with default latent size and
/// jitter.
pub fn make_synthetic(
    n: usize,
    k: usize,
    views: usize,
    dims: &[usize],
    separation: f64,
    seed: u64,
) -> Result<MultiViewDataset> {
    if dims.len() != views {
        return Err(Error::InvalidArgument(format!(
            "{} dims given for {views} views",
            dims.len()
        )));
    }
    SyntheticSpec::new(n, k, dims.to_vec(), separation, seed).generate()
}

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || {
        let e: f64 = rng.sample(StandardNormal);
        e * scale
    })
}

fn cluster_means(k: usize, r: usize, separation: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut means = gaussian(rng, (k, r), 1.0);
    // Gram-Schmidt keeps means equidistant when there is room for it.
    for i in 0..k {
        if i < r {
            for j in 0..i {
                let prev = means.row(j).to_owned();
                let proj = means.row(i).dot(&prev) / prev.dot(&prev).max(1e-300);
                means.row_mut(i).scaled_add(-proj, &prev);
            }
        }
        let mut row = means.row_mut(i);
        let norm = row.dot(&row).sqrt().max(1e-12);
        row *= separation / norm;
    }
    means
}

fn standardize(x: &mut Array2<f64>) {
    let mean: Array1<f64> = x.mean_axis(Axis(0)).expect("non-empty view");
    *x -= &mean;
    let sd = x.map_axis(Axis(0), |c| (c.dot(&c) / c.len() as f64).sqrt().max(1e-12));
    *x /= &sd;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{accuracy, kmeans_best_of};

    #[test]
    fn same_seed_same_dataset() {
        let a = make_synthetic(60, 3, 2, &[5, 7], 4.0, 9).unwrap();
        let b = make_synthetic(60, 3, 2, &[5, 7], 4.0, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, make_synthetic(60, 3, 2, &[5, 7], 4.0, 10).unwrap());
    }

    #[test]
    fn rejects_too_few_samples() {
        assert!(matches!(
            make_synthetic(2, 3, 2, &[2, 2], 1.0, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn labels_are_balanced_and_shapes_match() {
        let ds = make_synthetic(600, 3, 2, &[20, 30], 6.0, 1).unwrap();
        assert_eq!(ds.dims(), vec![20, 30]);
        let labels = ds.labels.as_ref().unwrap();
        for k in 0..3 {
            assert_eq!(labels.iter().filter(|&&l| l == k).count(), 200);
        }
    }

    #[test]
    fn single_view_kmeans_recovers_clusters() {
        let ds = make_synthetic(600, 3, 2, &[20, 30], 6.0, 1).unwrap();
        let labels = ds.labels.clone().unwrap();
        for x in &ds.views {
            let res = kmeans_best_of(x, 3, 5, 10, 300).unwrap();
            let acc = accuracy(&res.labels, &labels).unwrap();
            assert!(acc >= 0.9, "acc {acc}");
        }
    }

    #[test]
    fn zero_separation_is_chance_level() {
        let mut accs = Vec::new();
        for seed in 0..5 {
            let ds = make_synthetic(600, 3, 2, &[20, 30], 0.0, seed).unwrap();
            let labels = ds.labels.clone().unwrap();
            let res = kmeans_best_of(&ds.views[0], 3, seed, 10, 300).unwrap();
            accs.push(accuracy(&res.labels, &labels).unwrap());
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 1.0 / 3.0).abs() <= 0.1, "mean acc {mean}");
    }
}
