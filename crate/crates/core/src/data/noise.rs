//! Missing-view and observation-noise injection.
//!
//! Every random choice about sample `i` comes from its own ChaCha stream
//! keyed by `(seed, purpose, id_i)`, and selections are made by ranking
//! per-sample keys. Results therefore depend only on the input, the seed and
//! the sample identities, not on row order.

use ndarray::{Array1, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::MultiViewDataset;
use crate::error::{Error, Result};

/// Default additive noise scale, in units of the per-feature standard deviation.
pub const DEFAULT_OBSERVATION_STD: f64 = 0.5;

const MISSING_TAG: u64 = 0x6d69_7373_696e_6700;
const OBSERVATION_TAG: u64 = 0x6f62_7365_7276_0000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Fraction of samples made incomplete.
    pub missing_ratio: f64,
    /// Fraction of samples whose observed features are perturbed, per view.
    pub observation_ratio: f64,
    /// Perturbation scale relative to each feature's standard deviation.
    pub observation_std: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn clean(seed: u64) -> Self {
        Self::equal(0.0, seed)
    }

    /// Both ratios set to `ratio`, the protocol used for noise sweeps.
    pub fn equal(ratio: f64, seed: u64) -> Self {
        Self {
            missing_ratio: ratio,
            observation_ratio: ratio,
            observation_std: DEFAULT_OBSERVATION_STD,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.missing_ratio) || !(0.0..=1.0).contains(&self.observation_ratio) {
            return Err(Error::InvalidArgument(format!(
                "noise ratios must lie in [0, 1], got missing={} observation={}",
                self.missing_ratio, self.observation_ratio
            )));
        }
        if !(self.observation_std > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "observation std must be positive, got {}",
                self.observation_std
            )));
        }
        Ok(())
    }
}

/// Applies missing noise, then observation noise. The two may hit the same
/// samples.
pub fn inject_noise(ds: &MultiViewDataset, spec: &NoiseSpec) -> Result<MultiViewDataset> {
    spec.validate()?;
    let ds = if spec.missing_ratio > 0.0 {
        inject_missing(ds, spec.missing_ratio, spec.seed)?
    } else {
        ds.clone()
    };
    inject_observation_noise(&ds, spec.observation_ratio, spec.observation_std, spec.seed)
}

fn sample_stream(seed: u64, tag: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag);
    rng.set_stream(id);
    rng
}

fn default_ids(n: usize) -> Vec<u64> {
    (0..n as u64).collect()
}

fn check_ids(ds: &MultiViewDataset, ids: &[u64]) -> Result<()> {
    if ids.len() != ds.n_samples() {
        return Err(Error::InvalidArgument(format!(
            "{} sample ids for {} samples",
            ids.len(),
            ds.n_samples()
        )));
    }
    Ok(())
}

/// Makes exactly `round(ratio · N)` fully observed samples incomplete.
///
/// Each chosen sample loses between 1 and `V − 1` views (count and views
/// uniform); its rows in the dropped views are zeroed.
pub fn inject_missing(ds: &MultiViewDataset, ratio: f64, seed: u64) -> Result<MultiViewDataset> {
    inject_missing_with_ids(ds, ratio, seed, &default_ids(ds.n_samples()))
}

/// [`inject_missing`] with caller-supplied sample identities driving the
/// per-sample random streams.
pub fn inject_missing_with_ids(ds: &MultiViewDataset, ratio: f64, seed: u64, ids: &[u64]) -> Result<MultiViewDataset> {
    check_ids(ds, ids)?;
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!(
            "missing ratio must lie in [0, 1), got {ratio}"
        )));
    }
    let n_views = ds.n_views();
    if n_views < 2 {
        return Err(Error::InvalidArgument(
            "missing-view noise needs at least two views".into(),
        ));
    }
    let n = ds.n_samples();
    let target = (ratio * n as f64).round() as usize;
    if target == 0 {
        return Ok(ds.clone());
    }

    let mut streams: Vec<(u64, usize, ChaCha8Rng)> = (0..n)
        .filter(|&i| ds.mask.row(i).iter().all(|&o| o))
        .map(|i| {
            let mut rng = sample_stream(seed, MISSING_TAG, ids[i]);
            (rng.random::<u64>(), i, rng)
        })
        .collect();
    if target > streams.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot make {target} samples incomplete: only {} are fully observed",
            streams.len()
        )));
    }
    streams.sort_by_key(|(key, i, _)| (*key, ids[*i]));

    let mut out = ds.clone();
    for (_, i, mut rng) in streams.into_iter().take(target) {
        let n_drop = rng.random_range(1..n_views);
        for v in index::sample(&mut rng, n_views, n_drop) {
            out.mask[[i, v]] = false;
            out.views[v].row_mut(i).fill(0.0);
        }
    }
    Ok(out)
}

/// Perturbs `round(ratio · N)` observed rows per view with zero-mean Gaussian
/// noise of per-feature scale `std · sd_j`, where `sd_j` is the feature's
/// standard deviation over observed rows. Masked rows are never touched.
pub fn inject_observation_noise(ds: &MultiViewDataset, ratio: f64, std: f64, seed: u64) -> Result<MultiViewDataset> {
    inject_observation_noise_with_ids(ds, ratio, std, seed, &default_ids(ds.n_samples()))
}

pub fn inject_observation_noise_with_ids(
    ds: &MultiViewDataset,
    ratio: f64,
    std: f64,
    seed: u64,
    ids: &[u64],
) -> Result<MultiViewDataset> {
    check_ids(ds, ids)?;
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!(
            "observation ratio must lie in [0, 1], got {ratio}"
        )));
    }
    if !(std > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "observation std must be positive, got {std}"
        )));
    }
    let n = ds.n_samples();
    let target = (ratio * n as f64).round() as usize;
    let mut out = ds.clone();
    if target == 0 {
        return Ok(out);
    }

    for v in 0..ds.n_views() {
        let observed: Vec<usize> = (0..n).filter(|&i| ds.mask[[i, v]]).collect();
        let scale = feature_std(ds, v, &observed) * std;
        let tag = OBSERVATION_TAG.wrapping_add(v as u64);
        let mut streams: Vec<(u64, usize, ChaCha8Rng)> = observed
            .iter()
            .map(|&i| {
                let mut rng = sample_stream(seed, tag, ids[i]);
                (rng.random::<u64>(), i, rng)
            })
            .collect();
        streams.sort_by_key(|(key, i, _)| (*key, ids[*i]));
        for (_, i, mut rng) in streams.into_iter().take(target) {
            let mut row = out.views[v].row_mut(i);
            for (x, s) in row.iter_mut().zip(scale.iter()) {
                let e: f64 = rng.sample(StandardNormal);
                *x += s * e;
            }
        }
    }
    Ok(out)
}

/// Population standard deviation of each feature over `rows`. Values are
/// sorted before summation so the result does not depend on row order.
fn feature_std(ds: &MultiViewDataset, view: usize, rows: &[usize]) -> Array1<f64> {
    let x = ds.views[view].select(Axis(0), rows);
    let m = rows.len().max(1) as f64;
    Array1::from_iter(x.columns().into_iter().map(|col| {
        let mut vals: Vec<f64> = col.to_vec();
        vals.sort_by(f64::total_cmp);
        let mean = vals.iter().sum::<f64>() / m;
        let mut dev: Vec<f64> = vals.iter().map(|x| (x - mean) * (x - mean)).collect();
        dev.sort_by(f64::total_cmp);
        (dev.iter().sum::<f64>() / m).sqrt()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn fixture(n: usize, views: usize) -> MultiViewDataset {
        let dims: Vec<usize> = (0..views).map(|v| 3 + v).collect();
        make_synthetic(n, 2, views, &dims, 3.0, 11).unwrap()
    }

    #[test]
    fn zero_missing_ratio_is_identity() {
        let ds = fixture(40, 2);
        assert_eq!(inject_missing(&ds, 0.0, 1).unwrap(), ds);
    }

    #[test]
    fn half_missing_on_two_views_masks_exactly_half() {
        let ds = fixture(100, 2);
        let out = inject_missing(&ds, 0.5, 3).unwrap();
        let one_zero = out
            .mask
            .outer_iter()
            .filter(|r| r.iter().filter(|&&o| !o).count() == 1)
            .count();
        assert_eq!(one_zero, 50);
        assert_eq!(out.incomplete_count(), 50);
        for i in 0..100 {
            for v in 0..2 {
                if !out.mask[[i, v]] {
                    assert!(out.views[v].row(i).iter().all(|&x| x == 0.0));
                }
            }
        }
    }

    #[test]
    fn impossible_count_is_rejected() {
        let ds = fixture(10, 2);
        let once = inject_missing(&ds, 0.8, 1).unwrap();
        assert!(matches!(inject_missing(&once, 0.5, 2), Err(Error::InvalidArgument(_))));
        assert!(matches!(inject_missing(&ds, 1.0, 2), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn three_views_drop_one_or_two() {
        let ds = fixture(300, 3);
        let out = inject_missing(&ds, 0.6, 9).unwrap();
        let mut counts = [0usize; 4];
        for row in out.mask.outer_iter() {
            counts[row.iter().filter(|&&o| !o).count()] += 1;
        }
        assert_eq!(counts[0], 120);
        assert_eq!(counts[3], 0);
        assert!(counts[1] > 40 && counts[2] > 40, "{counts:?}");
    }

    #[test]
    fn zero_observation_ratio_is_bit_identical() {
        let ds = fixture(50, 2);
        assert_eq!(inject_observation_noise(&ds, 0.0, 0.5, 4).unwrap(), ds);
    }

    #[test]
    fn half_observation_noise_changes_exactly_half_the_rows() {
        let ds = fixture(100, 2);
        let out = inject_observation_noise(&ds, 0.5, 0.5, 4).unwrap();
        for v in 0..2 {
            let changed = (0..100).filter(|&i| out.views[v].row(i) != ds.views[v].row(i)).count();
            assert_eq!(changed, 50, "view {v}");
        }
    }

    #[test]
    fn masked_rows_stay_zero_under_observation_noise() {
        let ds = inject_missing(&fixture(60, 2), 0.5, 1).unwrap();
        let out = inject_observation_noise(&ds, 1.0, 1.0, 2).unwrap();
        for i in 0..60 {
            for v in 0..2 {
                if !ds.mask[[i, v]] {
                    assert!(out.views[v].row(i).iter().all(|&x| x == 0.0));
                }
            }
        }
    }

    #[test]
    fn observation_noise_has_zero_mean() {
        // 10^4 perturbed scalars: 2500 rows x 4 features.
        let x = Array2::from_shape_fn((2500, 4), |(i, j)| ((i * 7 + j) % 13) as f64);
        let ds = MultiViewDataset::new("flat", vec![x.clone(), x], None).unwrap();
        let out = inject_observation_noise(&ds, 1.0, 0.5, 21).unwrap();
        let diff = &out.views[0] - &ds.views[0];
        let sd = feature_std(&ds, 0, &(0..2500).collect::<Vec<_>>());
        let z: Vec<f64> = diff
            .outer_iter()
            .flat_map(|r| r.iter().zip(sd.iter()).map(|(d, s)| d / s).collect::<Vec<_>>())
            .collect();
        let m = z.len() as f64;
        let mean = z.iter().sum::<f64>() / m;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
        let se = (var / m).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean} se {se}");
        assert!((var.sqrt() - 0.5).abs() < 0.02, "sd {}", var.sqrt());
    }

    #[test]
    fn injection_is_deterministic() {
        let ds = fixture(80, 2);
        let spec = NoiseSpec::equal(0.5, 77);
        assert_eq!(inject_noise(&ds, &spec).unwrap(), inject_noise(&ds, &spec).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn every_sample_keeps_an_observed_view(
            seed in 0u64..1000,
            views in 2usize..5,
            m in prop::sample::select(vec![0.0, 0.2, 0.5, 0.8]),
            o in prop::sample::select(vec![0.0, 0.2, 0.5, 0.8]),
        ) {
            let ds = fixture(50, views);
            let out = inject_noise(&ds, &NoiseSpec { missing_ratio: m, observation_ratio: o, observation_std: 0.5, seed }).unwrap();
            for row in out.mask.outer_iter() {
                prop_assert!(row.iter().any(|&x| x));
            }
        }

        #[test]
        fn injection_commutes_with_permutation(seed in 0u64..1000, perm_seed in 0u64..1000) {
            let ds = fixture(30, 3);
            let ids: Vec<u64> = (0..30).collect();
            let mut order: Vec<usize> = (0..30).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            let permuted_ids: Vec<u64> = order.iter().map(|&i| ids[i]).collect();

            let then_permute = {
                let a = inject_missing_with_ids(&ds, 0.5, seed, &ids).unwrap();
                inject_observation_noise_with_ids(&a, 0.5, 0.5, seed, &ids).unwrap().permute(&order)
            };
            let permute_then = {
                let p = ds.permute(&order);
                let a = inject_missing_with_ids(&p, 0.5, seed, &permuted_ids).unwrap();
                inject_observation_noise_with_ids(&a, 0.5, 0.5, seed, &permuted_ids).unwrap()
            };
            prop_assert_eq!(then_permute, permute_then);
        }
    }
}
