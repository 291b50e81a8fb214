//! Latent-space imputation of missing views.
//!
//! A sample missing in view `u` but observed in view `v` is queried with its
//! view-`v` latent against two key sets: the observed latents of view `u`
//! (inter-view) and the observed latents of view `v` (intra-view). Attention
//! weights are `softmax((2⟨q, k⟩ - 2)/σ)`, i.e. `-‖q - k‖²/σ` for unit
//! vectors, and the two attention read-outs are blended with weight `α` and
//! re-normalized. When several views can donate, their estimates are
//! averaged.
//!
//! Keys are always the encoder outputs of observed slots; imputed values are
//! never fed back as keys.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Matrix, Var};
use crate::error::{Error, Result};
use crate::nn::NORM_EPS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImputationStrategy {
    #[default]
    DualAttention,
    /// Copy the donor view's latent.
    Direct,
    /// Mean of observed view-`u` latents sharing the sample's pseudo-label.
    Prototype,
    /// Mean view-`u` latent of the nearest donor-view neighbours.
    Knn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImputationConfig {
    /// Weight of the inter-view read-out.
    pub alpha: f64,
    pub sigma: f64,
    pub strategy: ImputationStrategy,
    /// Neighbours used by [`ImputationStrategy::Knn`].
    pub knn_k: usize,
}

impl Default for ImputationConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            sigma: 0.07,
            strategy: ImputationStrategy::DualAttention,
            knn_k: 5,
        }
    }
}

impl ImputationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.knn_k == 0 {
            return Err(Error::InvalidArgument("knn_k must be positive".into()));
        }
        Ok(())
    }
}

/// Per-view latents of one batch plus its observation pattern.
///
/// Rows of `latents[v]` for slots missing in `v` are placeholders until
/// [`impute_all`] fills them.
#[derive(Clone)]
pub struct LatentBatch<'t> {
    pub latents: Vec<Var<'t>>,
    /// `n × V`, true where observed.
    pub mask: Array2<bool>,
    /// `n × V`, true where the latent was produced by imputation.
    pub imputed: Array2<bool>,
    /// Cluster assignment per sample, needed by the prototype strategy.
    pub pseudo_labels: Option<Vec<usize>>,
}

impl<'t> LatentBatch<'t> {
    pub fn new(latents: Vec<Var<'t>>, mask: Array2<bool>) -> Result<Self> {
        if latents.len() != mask.ncols() {
            return Err(Error::Shape(format!(
                "{} latent blocks for {} mask columns",
                latents.len(),
                mask.ncols()
            )));
        }
        if let Some(z) = latents.iter().find(|z| z.rows() != mask.nrows()) {
            return Err(Error::Shape(format!(
                "latent block has {} rows, mask {}",
                z.rows(),
                mask.nrows()
            )));
        }
        let imputed = Array2::from_elem(mask.dim(), false);
        Ok(Self {
            latents,
            mask,
            imputed,
            pseudo_labels: None,
        })
    }

    pub fn with_pseudo_labels(mut self, labels: Option<Vec<usize>>) -> Self {
        self.pseudo_labels = labels;
        self
    }

    pub fn n(&self) -> usize {
        self.mask.nrows()
    }

    pub fn n_views(&self) -> usize {
        self.mask.ncols()
    }

    pub fn observed(&self, v: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.mask[[i, v]]).collect()
    }

    pub fn missing(&self, v: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| !self.mask[[i, v]]).collect()
    }

    /// Plain values of every latent block.
    pub fn values(&self) -> Vec<Matrix> {
        self.latents.iter().map(|z| z.value()).collect()
    }
}

/// `softmax_j((2⟨q_i, k_j⟩ - 2)/σ)` for plain matrices.
pub fn attention_weights(queries: &Matrix, keys: &Matrix, sigma: f64) -> Result<Matrix> {
    if keys.nrows() == 0 {
        return Err(Error::NoKeys);
    }
    if queries.ncols() != keys.ncols() {
        return Err(Error::Shape(format!(
            "queries have {} columns, keys {}",
            queries.ncols(),
            keys.ncols()
        )));
    }
    Ok(softmax_rows(&((queries.dot(&keys.t()) * 2.0 - 2.0) / sigma)))
}

fn attention<'t>(queries: Var<'t>, keys: Var<'t>, sigma: f64) -> Var<'t> {
    queries
        .matmul_t(keys)
        .scale(2.0 / sigma)
        .add_scalar(-2.0 / sigma)
        .softmax_rows()
}

/// Completed latents of view `u`: observed rows unchanged, missing rows
/// imputed.
pub fn impute_missing<'t>(batch: &LatentBatch<'t>, u: usize, cfg: &ImputationConfig) -> Result<Var<'t>> {
    cfg.validate()?;
    let n = batch.n();
    let zu = batch.latents[u];
    let missing = batch.missing(u);
    if missing.is_empty() {
        return Ok(zu);
    }
    let observed_u = batch.observed(u);
    if observed_u.is_empty() {
        return Err(Error::Imputation(format!(
            "view {u} has no observed sample in this batch"
        )));
    }
    let tape = zu.tape();
    let keys_u = zu.gather_rows(&observed_u);

    // slot in `missing` for each sample index
    let mut slot = vec![usize::MAX; n];
    for (s, &i) in missing.iter().enumerate() {
        slot[i] = s;
    }
    let mut donors = vec![0usize; missing.len()];
    let mut sum: Option<Var<'t>> = None;

    for v in (0..batch.n_views()).filter(|&v| v != u) {
        let rows: Vec<usize> = missing.iter().copied().filter(|&i| batch.mask[[i, v]]).collect();
        if rows.is_empty() {
            continue;
        }
        for &i in &rows {
            donors[slot[i]] += 1;
        }
        let zv = batch.latents[v];
        let queries = zv.gather_rows(&rows);
        let estimate = match cfg.strategy {
            ImputationStrategy::DualAttention => {
                let observed_v = batch.observed(v);
                let keys_v = zv.gather_rows(&observed_v);
                let inter = attention(queries, keys_u, cfg.sigma).matmul(keys_u);
                let intra = attention(queries, keys_v, cfg.sigma).matmul(keys_v);
                inter.scale(cfg.alpha) + intra.scale(1.0 - cfg.alpha)
            }
            ImputationStrategy::Direct => queries,
            ImputationStrategy::Prototype => {
                let weights = prototype_weights(batch, &rows, &observed_u)?;
                tape.constant(weights).matmul(keys_u)
            }
            ImputationStrategy::Knn => {
                let weights = knn_weights(batch, v, &rows, &observed_u, cfg.knn_k);
                tape.constant(weights).matmul(keys_u)
            }
        };
        let placed: Vec<usize> = rows.iter().map(|&i| slot[i]).collect();
        let contribution = estimate.index_add_rows(&placed, missing.len());
        sum = Some(match sum {
            None => contribution,
            Some(s) => s + contribution,
        });
    }

    let sum = sum.ok_or_else(|| Error::Imputation(format!("samples missing in view {u} have no other view")))?;
    if let Some(s) = donors.iter().position(|&c| c == 0) {
        return Err(Error::Imputation(format!("sample {} has no observed view", missing[s])));
    }
    let averaged = if donors.iter().all(|&c| c == 1) {
        sum
    } else {
        let d = sum.cols();
        let scale = Matrix::from_shape_fn((missing.len(), d), |(s, _)| 1.0 / donors[s] as f64);
        sum * tape.constant(scale)
    };
    let imputed = averaged.normalize_rows(NORM_EPS);
    Ok(keys_u.index_add_rows(&observed_u, n) + imputed.index_add_rows(&missing, n))
}

/// Fills every missing slot. All views are imputed from the same observed
/// latents, so the result does not depend on view order.
pub fn impute_all<'t>(batch: &LatentBatch<'t>, cfg: &ImputationConfig) -> Result<LatentBatch<'t>> {
    let latents = (0..batch.n_views())
        .map(|u| impute_missing(batch, u, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(LatentBatch {
        latents,
        mask: batch.mask.clone(),
        imputed: batch.mask.mapv(|o| !o),
        pseudo_labels: batch.pseudo_labels.clone(),
    })
}

/// Plain-value wrapper over [`impute_all`].
pub fn impute_latents(
    latents: &[Matrix],
    mask: &Array2<bool>,
    cfg: &ImputationConfig,
    pseudo_labels: Option<&[usize]>,
) -> Result<Vec<Matrix>> {
    let tape = crate::autodiff::Tape::new();
    let vars = latents.iter().map(|z| tape.constant(z.clone())).collect();
    let batch = LatentBatch::new(vars, mask.clone())?.with_pseudo_labels(pseudo_labels.map(<[usize]>::to_vec));
    Ok(impute_all(&batch, cfg)?.values())
}

/// Row `r` averages the observed view-`u` latents sharing the label of
/// `rows[r]`, or all of them when none does.
fn prototype_weights(batch: &LatentBatch<'_>, rows: &[usize], observed_u: &[usize]) -> Result<Matrix> {
    let labels = batch
        .pseudo_labels
        .as_ref()
        .ok_or_else(|| Error::Imputation("prototype imputation needs pseudo-labels".into()))?;
    if labels.len() != batch.n() {
        return Err(Error::Shape(format!(
            "{} pseudo-labels for {} samples",
            labels.len(),
            batch.n()
        )));
    }
    let mut w = Matrix::zeros((rows.len(), observed_u.len()));
    for (r, &i) in rows.iter().enumerate() {
        let members: Vec<usize> = (0..observed_u.len())
            .filter(|&k| labels[observed_u[k]] == labels[i])
            .collect();
        if members.is_empty() {
            w.row_mut(r).fill(1.0 / observed_u.len() as f64);
        } else {
            for k in &members {
                w[[r, *k]] = 1.0 / members.len() as f64;
            }
        }
    }
    Ok(w)
}

/// Row `r` averages the view-`u` latents of the `k` samples closest to
/// `rows[r]` in view `v` among those observed in both views. Ties go to
/// the lower sample index.
fn knn_weights(batch: &LatentBatch<'_>, v: usize, rows: &[usize], observed_u: &[usize], k: usize) -> Matrix {
    let zv = batch.latents[v].value();
    let candidates: Vec<usize> = (0..observed_u.len())
        .filter(|&c| batch.mask[[observed_u[c], v]])
        .collect();
    let mut w = Matrix::zeros((rows.len(), observed_u.len()));
    for (r, &i) in rows.iter().enumerate() {
        if candidates.is_empty() {
            w.row_mut(r).fill(1.0 / observed_u.len() as f64);
            continue;
        }
        let mut scored: Vec<(f64, usize)> = candidates
            .iter()
            .map(|&c| {
                let j = observed_u[c];
                let d: f64 = zv
                    .row(i)
                    .iter()
                    .zip(zv.row(j).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (d, c)
            })
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(observed_u[a.1].cmp(&observed_u[b.1])));
        let take = k.min(scored.len());
        for &(_, c) in &scored[..take] {
            w[[r, c]] = 1.0 / take as f64;
        }
    }
    w
}
