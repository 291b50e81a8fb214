//! Reliability graph between two sets of latents.
//!
//! `s_ij = exp(-‖z_i^u - z_j^v‖² / σ)` for `i ≠ j` and `s_ii = 1`, then a
//! degree normalization turns each anchor's similarities into a distribution
//! over candidate partners. The graph is computed from detached latents and
//! used as constant pair weights by the contrastive objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
#[cfg_attr(not(feature = "parallel"), allow(unused_imports))]
use crate::par::{self, prelude::*};

/// Which side of the similarity matrix the degree normalization divides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphNormalization {
    /// `D⁻¹S`: every row (anchor) sums to one.
    #[default]
    Row,
    /// `SD⁻¹` read literally, with `d_jj = Σ_k s_jk`.
    Column,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityGraph {
    /// `n × n` pair weights.
    pub weights: Matrix,
    pub sigma: f64,
    pub pair: (usize, usize),
}

impl ReliabilityGraph {
    pub fn build(
        zu: &Matrix,
        zv: &Matrix,
        sigma: f64,
        pair: (usize, usize),
        normalization: GraphNormalization,
    ) -> Result<Self> {
        let s = pairwise_similarity(zu, zv, sigma)?;
        Ok(Self {
            weights: normalize_graph_with(&s, normalization)?,
            sigma,
            pair,
        })
    }

    pub fn n(&self) -> usize {
        self.weights.nrows()
    }
}

/// Gaussian-kernel similarity with a unit diagonal. Off-diagonal entries are
/// floored at the smallest positive normal `f64` so they stay strictly
/// positive for tiny `σ`.
pub fn pairwise_similarity(zu: &Matrix, zv: &Matrix, sigma: f64) -> Result<Matrix> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    if zu.dim() != zv.dim() {
        return Err(Error::Shape(format!(
            "latent blocks differ: {:?} vs {:?}",
            zu.dim(),
            zv.dim()
        )));
    }
    let n = zu.nrows();
    // ‖a - b‖² = ‖a‖² + ‖b‖² - 2⟨a, b⟩, clamped against rounding below zero
    let cross = zu.dot(&zv.t());
    let sq_u: Vec<f64> = zu.outer_iter().map(|r| r.dot(&r)).collect();
    let sq_v: Vec<f64> = zv.outer_iter().map(|r| r.dot(&r)).collect();
    let rows: Vec<Vec<f64>> = par::range(n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        1.0
                    } else {
                        let d2 = (sq_u[i] + sq_v[j] - 2.0 * cross[[i, j]]).max(0.0);
                        (-d2 / sigma).exp().max(f64::MIN_POSITIVE)
                    }
                })
                .collect()
        })
        .collect();
    Ok(Matrix::from_shape_vec((n, n), rows.into_iter().flatten().collect()).expect("n × n"))
}

/// Row-stochastic normalization `D⁻¹S` with `d_ii = Σ_j s_ij`.
pub fn normalize_graph(s: &Matrix) -> Result<Matrix> {
    normalize_graph_with(s, GraphNormalization::Row)
}

pub fn normalize_graph_with(s: &Matrix, normalization: GraphNormalization) -> Result<Matrix> {
    if s.nrows() != s.ncols() {
        return Err(Error::Shape(format!(
            "similarity matrix must be square, got {:?}",
            s.dim()
        )));
    }
    let degrees: Vec<f64> = s.outer_iter().map(|r| r.sum()).collect();
    if let Some(i) = degrees.iter().position(|&d| !(d > 0.0) || !d.is_finite()) {
        return Err(Error::Numerical(format!("degree of node {i} is {}", degrees[i])));
    }
    let mut a = s.clone();
    match normalization {
        GraphNormalization::Row => {
            for (mut row, d) in a.outer_iter_mut().zip(&degrees) {
                row /= *d;
            }
        }
        GraphNormalization::Column => {
            for (mut col, d) in a.columns_mut().into_iter().zip(&degrees) {
                col /= *d;
            }
        }
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::normalize_rows;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        normalize_rows(
            &Matrix::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0)),
            1e-12,
        )
    }

    #[test]
    fn diagonal_is_one_regardless_of_latents() {
        let zu = random_unit(5, 3, 1);
        let zv = random_unit(5, 3, 2);
        let s = pairwise_similarity(&zu, &zv, 0.07).unwrap();
        for i in 0..5 {
            assert_eq!(s[[i, i]], 1.0);
        }
    }

    #[test]
    fn identical_off_diagonal_latents_give_one() {
        let z = array![[1.0, 0.0], [1.0, 0.0]];
        let s = pairwise_similarity(&z, &z, 0.5).unwrap();
        assert_eq!(s[[0, 1]], 1.0);
    }

    #[test]
    fn orthogonal_unit_vectors_at_unit_sigma() {
        let zu = array![[1.0, 0.0], [0.0, 1.0]];
        let s = pairwise_similarity(&zu, &zu, 1.0).unwrap();
        assert!((s[[0, 1]] - 0.1353352832366127).abs() < 1e-15);
    }

    #[test]
    fn non_positive_sigma_is_rejected() {
        let z = random_unit(2, 2, 0);
        assert!(matches!(
            pairwise_similarity(&z, &z, 0.0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            pairwise_similarity(&z, &z, -1.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn two_node_closed_form() {
        let s = 0.3;
        let a = normalize_graph(&array![[1.0, s], [s, 1.0]]).unwrap();
        let expected = array![[1.0 / (1.0 + s), s / (1.0 + s)], [s / (1.0 + s), 1.0 / (1.0 + s)]];
        for (x, y) in a.iter().zip(expected.iter()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn vanishing_similarity_tends_to_identity() {
        let s = array![[1.0, 1e-300, 1e-300], [1e-300, 1.0, 1e-300], [1e-300, 1e-300, 1.0]];
        let a = normalize_graph(&s).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((a[[i, j]] - target).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rows_sum_to_one_for_random_positive_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for n in [2, 5, 50] {
            let s = Matrix::from_shape_simple_fn((n, n), || rng.random_range(1e-6..1.0));
            let a = normalize_graph(&s).unwrap();
            for row in a.outer_iter() {
                assert!((row.sum() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn column_variant_is_the_literal_product() {
        let s = array![[1.0, 0.2, 0.4], [0.5, 1.0, 0.1], [0.3, 0.6, 1.0]];
        let a = normalize_graph_with(&s, GraphNormalization::Column).unwrap();
        let d = [1.6, 1.6, 1.9];
        for i in 0..3 {
            for j in 0..3 {
                assert!((a[[i, j]] - s[[i, j]] / d[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn smaller_sigma_concentrates_mass_on_the_diagonal() {
        let zu = random_unit(6, 4, 3);
        let zv = random_unit(6, 4, 4);
        let off_mass = |sigma: f64| {
            let a = ReliabilityGraph::build(&zu, &zv, sigma, (0, 1), GraphNormalization::Row)
                .unwrap()
                .weights;
            (0..6)
                .map(|i| (a.row(i).sum() - a[[i, i]]) / a[[i, i]])
                .fold(0.0, f64::max)
        };
        let (a, b, c) = (off_mass(1.0), off_mass(0.1), off_mass(0.01));
        assert!(a > b && b > c, "{a} {b} {c}");
        assert!(c < 1e-6);
    }

    proptest! {
        #[test]
        fn graph_is_a_distribution_per_row(seed in 0u64..10_000, n in 2usize..12, d in 2usize..6) {
            let zu = random_unit(n, d, seed);
            let zv = random_unit(n, d, seed + 1);
            let a = ReliabilityGraph::build(&zu, &zv, 0.07, (0, 1), GraphNormalization::Row).unwrap().weights;
            for row in a.outer_iter() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-9);
                for &x in row { prop_assert!(x > 0.0 && x <= 1.0); }
            }
        }

        #[test]
        fn closer_pairs_are_more_similar(seed in 0u64..10_000, t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            prop_assume!((t1 - t2).abs() > 1e-6);
            let base = random_unit(1, 3, seed);
            let other = random_unit(1, 3, seed + 7);
            let mix = |t: f64| {
                let p = &base * (1.0 - t) + &other * t;
                ndarray::concatenate![ndarray::Axis(0), base.view(), p.view()]
            };
            let s1 = pairwise_similarity(&mix(t1), &mix(t1), 0.5).unwrap()[[0, 1]];
            let s2 = pairwise_similarity(&mix(t2), &mix(t2), 0.5).unwrap()[[0, 1]];
            // the mixed point moves monotonically away from `base` as t grows
            prop_assert_eq!(t1 < t2, s1 > s2);
        }

        #[test]
        fn permutation_equivariance(seed in 0u64..10_000) {
            let n = 7;
            let zu = random_unit(n, 3, seed);
            let zv = random_unit(n, 3, seed + 1);
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            let a = normalize_graph(&pairwise_similarity(&zu, &zv, 0.07).unwrap()).unwrap();
            let pu = zu.select(ndarray::Axis(0), &order);
            let pv = zv.select(ndarray::Axis(0), &order);
            let ap = normalize_graph(&pairwise_similarity(&pu, &pv, 0.07).unwrap()).unwrap();
            for i in 0..n {
                for j in 0..n {
                    prop_assert!((ap[[i, j]] - a[[order[i], order[j]]]).abs() < 1e-15);
                }
            }
        }
    }
}
