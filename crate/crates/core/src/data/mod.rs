//! Multi-view datasets, ingestion, synthetic fixtures and noise injection.

mod io;
mod noise;
mod synthetic;

pub use io::{load_dataset, read_csv_matrix, save_dataset, write_csv_matrix, Manifest, MatrixFormat};
pub use noise::{
    inject_missing, inject_missing_with_ids, inject_noise, inject_observation_noise, inject_observation_noise_with_ids,
    NoiseSpec, DEFAULT_OBSERVATION_STD,
};
pub use synthetic::{make_synthetic, SyntheticSpec};

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

/// Per-view feature matrices sharing one sample axis.
///
/// `mask[[i, v]]` is `true` when sample `i` is observed in view `v`. Rows
/// under a `false` mask entry are stored as zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewDataset {
    pub name: String,
    pub views: Vec<Array2<f64>>,
    pub mask: Array2<bool>,
    pub labels: Option<Vec<usize>>,
}

impl MultiViewDataset {
    /// Builds a fully observed dataset after checking shapes.
    pub fn new(name: impl Into<String>, views: Vec<Array2<f64>>, labels: Option<Vec<usize>>) -> Result<Self> {
        let n = views.first().map(|v| v.nrows()).unwrap_or(0);
        let mask = Array2::from_elem((n, views.len()), true);
        Self::with_mask(name, views, mask, labels)
    }

    pub fn with_mask(
        name: impl Into<String>,
        views: Vec<Array2<f64>>,
        mask: Array2<bool>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            views,
            mask,
            labels,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n_samples(&self) -> usize {
        self.mask.nrows()
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.views.iter().map(|v| v.ncols()).collect()
    }

    pub fn is_observed(&self, sample: usize, view: usize) -> bool {
        self.mask[[sample, view]]
    }

    /// Number of distinct label values, if labels are present.
    pub fn n_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().copied().max().map_or(0, |m| m + 1))
    }

    /// Samples missing in at least one view.
    pub fn incomplete_count(&self) -> usize {
        self.mask
            .axis_iter(Axis(0))
            .filter(|row| row.iter().any(|&o| !o))
            .count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::Schema("dataset has no views".into()));
        }
        let n = self.views[0].nrows();
        for (v, x) in self.views.iter().enumerate() {
            if x.nrows() != n {
                return Err(Error::Schema(format!(
                    "view {v} has {} rows, view 0 has {n}",
                    x.nrows()
                )));
            }
        }
        if self.mask.dim() != (n, self.views.len()) {
            return Err(Error::Schema(format!(
                "mask is {:?}, expected ({n}, {})",
                self.mask.dim(),
                self.views.len()
            )));
        }
        if let Some(i) = self.mask.axis_iter(Axis(0)).position(|row| !row.iter().any(|&o| o)) {
            return Err(Error::Schema(format!("sample {i} is not observed in any view")));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(Error::Schema(format!("{} labels for {n} samples", labels.len())));
            }
        }
        Ok(())
    }

    /// Row-permuted copy: sample `k` of the result is sample `order[k]` here.
    pub fn permute(&self, order: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            views: self.views.iter().map(|x| x.select(Axis(0), order)).collect(),
            mask: self.mask.select(Axis(0), order),
            labels: self.labels.as_ref().map(|l| order.iter().map(|&i| l[i]).collect()),
        }
    }
}
