//! Training objectives.
//!
//! Every loss is built on an autodiff [`Tape`](crate::autodiff::Tape) so the trainer can
//! backpropagate through it. Reliability graphs and distillation targets
//! enter as constants.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Matrix, Var, LOG_FLOOR};
use crate::cluster::{kmeans_best_of, match_labels, DEFAULT_MAX_ITER};
use crate::error::{Error, Result};
use crate::graph::{GraphNormalization, ReliabilityGraph};
use crate::nn::BoundModel;

/// Which contrastive objective ties the views together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastiveVariant {
    /// Plain InfoNCE with the same-sample pair as the only positive,
    /// inter-view terms only.
    Con,
    /// Graph-weighted positives inside the log: `-ln Σ_j a_ij softmax_j`.
    FnCon,
    /// Reliability-weighted noise contrastive loss.
    #[default]
    Ours,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub variant: ContrastiveVariant,
    /// Temperature `τ_c`.
    pub tau: f64,
    /// Kernel width for the reliability graph.
    pub sigma: f64,
    pub normalization: GraphNormalization,
    /// Drop the `j = i` pair from intra-view terms.
    pub exclude_self_intra: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            variant: ContrastiveVariant::Ours,
            tau: 0.5,
            sigma: 0.07,
            normalization: GraphNormalization::Row,
            exclude_self_intra: false,
        }
    }
}

/// Per-epoch loss components. `total` is always `(crec + ncon) + dist`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub crec: f64,
    pub ncon: f64,
    pub dist: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(crec: f64, ncon: f64, dist: f64) -> Result<Self> {
        let total = crec + ncon + dist;
        for (name, x) in [("crec", crec), ("ncon", ncon), ("dist", dist)] {
            if !x.is_finite() {
                return Err(Error::Numerical(format!("{name} loss is {x}")));
            }
        }
        Ok(Self {
            crec,
            ncon,
            dist,
            total,
        })
    }
}

/// Sums the three components on the tape in the same order as
/// [`LossBreakdown::new`].
pub fn total_loss<'t>(crec: Var<'t>, ncon: Var<'t>, dist: Var<'t>) -> Result<(Var<'t>, LossBreakdown)> {
    let breakdown = LossBreakdown::new(crec.item(), ncon.item(), dist.item())?;
    Ok((crec + ncon + dist, breakdown))
}

// ---------------------------------------------------------------------------
// reconstruction

/// Mean squared error over all entries.
pub fn mse<'t>(pred: Var<'t>, target: Var<'t>) -> Var<'t> {
    let r = pred - target;
    (r * r).mean()
}

/// Cross-view reconstruction summed over ordered view pairs `u ≠ v`:
/// view `v` is decoded from the view-`u` latent of every sample observed in
/// both. Pairs without such samples contribute nothing.
///
/// `inputs[v]` is the batch of view-`v` features, `latents[u]` the
/// (non-imputed) view-`u` latents and `mask` the batch observation mask.
pub fn cross_view_recon_loss<'t>(
    model: &BoundModel<'t, '_>,
    inputs: &[Var<'t>],
    latents: &[Var<'t>],
    mask: ArrayView2<'_, bool>,
) -> Result<Var<'t>> {
    let n_views = inputs.len();
    if n_views == 0 {
        return Err(Error::InvalidArgument("no views to reconstruct".into()));
    }
    let tape = inputs[0].tape();
    if latents.len() != n_views || mask.ncols() != n_views {
        return Err(Error::Shape(format!(
            "{} inputs, {} latents, {} mask columns",
            n_views,
            latents.len(),
            mask.ncols()
        )));
    }
    let mut total = tape.scalar(0.0);
    for u in 0..n_views {
        for v in 0..n_views {
            if u == v {
                continue;
            }
            let rows: Vec<usize> = (0..mask.nrows()).filter(|&i| mask[[i, u]] && mask[[i, v]]).collect();
            if rows.is_empty() {
                log::debug!("no sample observed in both views {u} and {v}");
                continue;
            }
            let pred = model.decode(v, latents[u].gather_rows(&rows));
            total = total + mse(pred, inputs[v].gather_rows(&rows));
        }
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// contrastive

fn check_pair(zu: Var<'_>, zv: Var<'_>) -> Result<usize> {
    if zu.shape() != zv.shape() {
        return Err(Error::Shape(format!(
            "latent shapes {:?} and {:?}",
            zu.shape(),
            zv.shape()
        )));
    }
    let n = zu.rows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "contrastive loss needs n >= 2, got {n}"
        )));
    }
    Ok(n)
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    Ok(())
}

/// InfoNCE: `-mean_i ln softmax_j(⟨z_i^u, z_j^v⟩/τ)_{j=i}`.
pub fn standard_contrastive_loss<'t>(zu: Var<'t>, zv: Var<'t>, tau: f64) -> Result<Var<'t>> {
    let n = check_pair(zu, zv)?;
    check_tau(tau)?;
    let tape = zu.tape();
    let logp = zu.matmul_t(zv).scale(1.0 / tau).log_softmax_rows();
    let eye = tape.constant(Array2::eye(n));
    Ok(-(logp * eye).row_sum().mean())
}

/// Diagnostics from one contrastive evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ContrastiveStats {
    /// Anchors whose denominator fell below the log floor.
    pub floored: usize,
}

/// Reliability-weighted noise contrastive loss for one latent pair.
///
/// For anchor `i` with logits `l_ij = ⟨z_i^u, z_j^v⟩/τ`:
/// `-ln [ exp(Σ_j a_ij l_ij) / Σ_j (1 - a_ij) exp(l_ij) ]`, averaged over
/// anchors. With `exclude_self` the `j = i` pair is dropped from both sums.
pub fn noise_contrastive_loss<'t>(
    zu: Var<'t>,
    zv: Var<'t>,
    graph: &Matrix,
    tau: f64,
    exclude_self: bool,
) -> Result<(Var<'t>, ContrastiveStats)> {
    let n = check_pair(zu, zv)?;
    check_tau(tau)?;
    check_graph(graph, n)?;
    let keep = if exclude_self {
        Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { 1.0 })
    } else {
        Array2::ones((n, n))
    };
    let pos = graph * &keep;
    let neg = (1.0 - graph) * &keep;
    if let Some(i) = neg.outer_iter().position(|r| r.iter().all(|&w| w == 0.0)) {
        return Err(Error::Numerical(format!(
            "anchor {i} has no negative weight; denominator is identically zero"
        )));
    }

    let tape = zu.tape();
    let logits = zu.matmul_t(zv).scale(1.0 / tau);
    let numerator = (tape.constant(pos) * logits).row_sum();
    let denominator = (tape.constant(neg) * logits.exp()).row_sum();
    let floored = denominator.with_value(|d| d.iter().filter(|&&x| x < LOG_FLOOR).count());
    if floored > 0 {
        log::warn!("{floored} contrastive denominators clamped at {LOG_FLOOR}");
    }
    Ok(((denominator.ln() - numerator).mean(), ContrastiveStats { floored }))
}

/// Graph-weighted positives inside the log:
/// `-mean_i ln Σ_j a_ij softmax_j(l_ij)`.
pub fn fn_contrastive_loss<'t>(
    zu: Var<'t>,
    zv: Var<'t>,
    graph: &Matrix,
    tau: f64,
    exclude_self: bool,
) -> Result<Var<'t>> {
    let n = check_pair(zu, zv)?;
    check_tau(tau)?;
    check_graph(graph, n)?;
    let mut weights = graph.clone();
    if exclude_self {
        weights.diag_mut().fill(0.0);
    }
    let tape = zu.tape();
    let probs = zu.matmul_t(zv).scale(1.0 / tau).softmax_rows();
    Ok(-(tape.constant(weights) * probs).row_sum().ln().mean())
}

fn check_graph(graph: &Matrix, n: usize) -> Result<()> {
    if graph.dim() != (n, n) {
        return Err(Error::Shape(format!("graph is {:?}, expected {n}×{n}", graph.dim())));
    }
    Ok(())
}

/// Contrastive objective over all views.
///
/// For the graph-based variants this is `Σ_{u≠v} [ℓ(u,v) + ℓ(u,u)]`, where
/// each term builds its own graph from the detached latents of that pair.
/// [`ContrastiveVariant::Con`] sums the inter-view terms only.
pub fn total_noise_contrastive<'t>(
    latents: &[Var<'t>],
    cfg: &ContrastiveConfig,
) -> Result<(Var<'t>, ContrastiveStats)> {
    if latents.len() < 2 {
        return Err(Error::InvalidArgument(
            "contrastive loss needs at least two views".into(),
        ));
    }
    let tape = latents[0].tape();
    let values: Vec<Matrix> = latents.iter().map(|z| z.value()).collect();
    let mut total = tape.scalar(0.0);
    let mut stats = ContrastiveStats::default();
    for u in 0..latents.len() {
        for v in 0..latents.len() {
            if u == v {
                continue;
            }
            if cfg.variant == ContrastiveVariant::Con {
                total = total + standard_contrastive_loss(latents[u], latents[v], cfg.tau)?;
                continue;
            }
            for (w, intra) in [(v, false), (u, true)] {
                let graph = ReliabilityGraph::build(&values[u], &values[w], cfg.sigma, (u, w), cfg.normalization)?;
                let exclude = intra && cfg.exclude_self_intra;
                let term = match cfg.variant {
                    ContrastiveVariant::Ours => {
                        let (loss, s) =
                            noise_contrastive_loss(latents[u], latents[w], &graph.weights, cfg.tau, exclude)?;
                        stats.floored += s.floored;
                        loss
                    }
                    ContrastiveVariant::FnCon => {
                        fn_contrastive_loss(latents[u], latents[w], &graph.weights, cfg.tau, exclude)?
                    }
                    ContrastiveVariant::Con => unreachable!(),
                };
                total = total + term;
            }
        }
    }
    Ok((total, stats))
}

// ---------------------------------------------------------------------------
// distillation

/// Self-supervision targets computed from the fused latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    pub pseudo_labels: Vec<usize>,
    /// `K × D` member means.
    pub centers: Matrix,
    /// `n × K` target distribution.
    pub q: Matrix,
    pub tau_d: f64,
}

impl ClusterState {
    /// Renames clusters to agree as far as possible with `previous`, so a
    /// refresh does not permute the targets the view cluster layers are
    /// being fitted to.
    pub fn align_to(&mut self, previous: &ClusterState) -> Result<()> {
        let k = self.centers.nrows();
        if previous.centers.nrows() != k {
            return Err(Error::Shape(format!(
                "{k} clusters against {} previous",
                previous.centers.nrows()
            )));
        }
        let map = match_labels(&self.pseudo_labels, &previous.pseudo_labels, k)?;
        let mut inverse = vec![0; k];
        for (old, &new) in map.iter().enumerate() {
            inverse[new] = old;
        }
        for l in &mut self.pseudo_labels {
            *l = map[*l];
        }
        self.centers = self.centers.select(Axis(0), &inverse);
        self.q = self.q.select(Axis(1), &inverse);
        Ok(())
    }
}

/// k-means on the fused latents, member-mean centers and the softmax
/// target `q_ij ∝ exp(⟨z_i, c_j⟩/τ_d)`.
pub fn build_cluster_state(fused: &Matrix, k: usize, tau_d: f64, seed: u64, restarts: usize) -> Result<ClusterState> {
    check_tau(tau_d)?;
    let result = kmeans_best_of(fused, k, seed, restarts, DEFAULT_MAX_ITER)?;
    let mut centers = Matrix::zeros((k, fused.ncols()));
    let mut counts = vec![0usize; k];
    for (row, &l) in fused.outer_iter().zip(&result.labels) {
        let mut c = centers.row_mut(l);
        c += &row;
        counts[l] += 1;
    }
    for (mut c, &m) in centers.outer_iter_mut().zip(&counts) {
        debug_assert!(m > 0, "k-means left an empty cluster");
        c /= m as f64;
    }
    let q = softmax_rows(&(fused.dot(&centers.t()) / tau_d));
    Ok(ClusterState {
        pseudo_labels: result.labels,
        centers,
        q,
        tau_d,
    })
}

/// Soft assignment of view latents to the view's cluster layer:
/// `softmax_j(⟨z_i, μ_j⟩/τ_d)`.
pub fn view_prediction<'t>(z: Var<'t>, centers: Var<'t>, tau_d: f64) -> Var<'t> {
    z.matmul(centers).scale(1.0 / tau_d).softmax_rows()
}

/// `Σ_v Σ_i Σ_j p_ij ln(p_ij / q_ij)` with `q` clamped at `1e-12`.
pub fn distillation_loss<'t>(predictions: &[Var<'t>], q: &Matrix) -> Result<Var<'t>> {
    let first = predictions
        .first()
        .ok_or_else(|| Error::InvalidArgument("no predictions to distill".into()))?;
    let tape = first.tape();
    let log_q = tape.constant(q.mapv(|x| x.max(LOG_FLOOR).ln()));
    let mut total = tape.scalar(0.0);
    for p in predictions {
        if p.shape() != q.dim() {
            return Err(Error::Shape(format!(
                "prediction {:?} vs target {:?}",
                p.shape(),
                q.dim()
            )));
        }
        total = total + (*p * (p.ln() - log_q)).sum();
    }
    Ok(total)
}

/// Plain-value KL divergence summed over rows, `0 · ln 0 = 0`.
pub fn kl_divergence(p: &Matrix, q: &Matrix) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", p.dim(), q.dim())));
    }
    Ok(p.iter()
        .zip(q.iter())
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / b.max(LOG_FLOOR)).ln())
        .sum())
}

/// Concatenates per-view latents along features.
pub fn fuse(latents: &[Matrix]) -> Matrix {
    let views: Vec<_> = latents.iter().map(|z| z.view()).collect();
    ndarray::concatenate(Axis(1), &views).expect("views share the sample count")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::testing::{eval, finite_difference_check};
    use crate::autodiff::{normalize_rows, Tape};
    use crate::graph::{normalize_graph, pairwise_similarity};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        normalize_rows(
            &Matrix::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0)),
            1e-12,
        )
    }

    fn graph_of(zu: &Matrix, zv: &Matrix, sigma: f64) -> Matrix {
        normalize_graph(&pairwise_similarity(zu, zv, sigma).unwrap()).unwrap()
    }

    /// Scalar loops straight from the definition.
    fn brute_ncon(zu: &Matrix, zv: &Matrix, a: &Matrix, tau: f64) -> f64 {
        let n = zu.nrows();
        let mut total = 0.0;
        for i in 0..n {
            let mut expo = 0.0;
            let mut den = 0.0;
            for j in 0..n {
                let dot: f64 = (0..zu.ncols()).map(|k| zu[[i, k]] * zv[[j, k]]).sum();
                expo += a[[i, j]] * dot / tau;
                den += (1.0 - a[[i, j]]) * (dot / tau).exp();
            }
            total += -(expo.exp() / den).ln();
        }
        total / n as f64
    }

    fn ncon_value(zu: &Matrix, zv: &Matrix, a: &Matrix, tau: f64, exclude: bool) -> f64 {
        let tape = Tape::new();
        let (loss, _) =
            noise_contrastive_loss(tape.constant(zu.clone()), tape.constant(zv.clone()), a, tau, exclude).unwrap();
        loss.item()
    }

    #[test]
    fn breakdown_adds_up() {
        let b = LossBreakdown::new(1.0, 2.0, 0.5).unwrap();
        assert_eq!(b.total, 3.5);
        assert_eq!(b.total, b.crec + b.ncon + b.dist);
        assert!(matches!(
            LossBreakdown::new(f64::NAN, 0.0, 0.0),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn mse_scalar_case() {
        let tape = Tape::new();
        let loss = mse(tape.constant(array![[0.3]]), tape.constant(array![[-1.2]]));
        assert!((loss.item() - 1.5f64.powi(2)).abs() < 1e-15);
    }

    #[test]
    fn infonce_identical_pair_is_ln2() {
        let z = array![[1.0, 0.0], [1.0, 0.0]];
        let tape = Tape::new();
        let loss = standard_contrastive_loss(tape.constant(z.clone()), tape.constant(z), 0.5).unwrap();
        assert!((loss.item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn infonce_rejects_single_sample() {
        let tape = Tape::new();
        let z = tape.constant(array![[1.0, 0.0]]);
        assert!(matches!(
            standard_contrastive_loss(z, z, 0.5),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn infonce_gradient() {
        let inputs = [unit(4, 3, 1), unit(4, 3, 2)];
        let err = finite_difference_check(
            &inputs,
            |_, v| standard_contrastive_loss(v[0].normalize_rows(1e-12), v[1].normalize_rows(1e-12), 0.5).unwrap(),
            1e-6,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn ncon_matches_brute_force() {
        for n in 2..=4 {
            let zu = unit(n, 3, n as u64);
            let zv = unit(n, 3, 10 + n as u64);
            let a = graph_of(&zu, &zv, 0.5);
            let got = ncon_value(&zu, &zv, &a, 0.5, false);
            let want = brute_ncon(&zu, &zv, &a, 0.5);
            assert!((got - want).abs() < 1e-9, "n={n}: {got} vs {want}");
        }
    }

    #[test]
    fn uniform_graph_numerator_is_mean_similarity() {
        let zu = unit(3, 2, 4);
        let zv = unit(3, 2, 5);
        let a = Matrix::from_elem((3, 3), 1.0 / 3.0);
        // with uniform weights the loss splits into ln(den) - mean_j l_ij
        let tau = 0.5;
        let logits = zu.dot(&zv.t()) / tau;
        let want: f64 = (0..3)
            .map(|i| {
                let den: f64 = logits.row(i).iter().map(|l| (2.0 / 3.0) * l.exp()).sum();
                den.ln() - logits.row(i).mean().unwrap()
            })
            .sum::<f64>()
            / 3.0;
        assert!((ncon_value(&zu, &zv, &a, tau, false) - want).abs() < 1e-12);
    }

    #[test]
    fn ncon_single_sample_and_degenerate_graph_fail() {
        let tape = Tape::new();
        let z = tape.constant(array![[1.0, 0.0]]);
        assert!(matches!(
            noise_contrastive_loss(z, z, &array![[1.0]], 0.5, false),
            Err(Error::InvalidArgument(_))
        ));
        let z2 = tape.constant(array![[1.0, 0.0], [0.0, 1.0]]);
        assert!(matches!(
            noise_contrastive_loss(z2, z2, &Matrix::ones((2, 2)), 0.5, false),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn ncon_gradient() {
        let zu = unit(4, 3, 21);
        let zv = unit(4, 3, 22);
        let a = graph_of(&zu, &zv, 0.07);
        for exclude in [false, true] {
            let err = finite_difference_check(
                &[zu.clone(), zv.clone()],
                |_, v| noise_contrastive_loss(v[0], v[1], &a, 0.5, exclude).unwrap().0,
                1e-6,
            );
            assert!(err < 1e-6, "{err}");
        }
    }

    #[test]
    fn fn_con_gradient_and_value() {
        let zu = unit(4, 3, 31);
        let zv = unit(4, 3, 32);
        let a = graph_of(&zu, &zv, 0.5);
        let err = finite_difference_check(
            &[zu.clone(), zv.clone()],
            |_, v| fn_contrastive_loss(v[0], v[1], &a, 0.5, false).unwrap(),
            1e-6,
        );
        assert!(err < 1e-6, "{err}");
        let p = softmax_rows(&(zu.dot(&zv.t()) / 0.5));
        let want: f64 = -(0..4).map(|i| (&a.row(i) * &p.row(i)).sum().ln()).sum::<f64>() / 4.0;
        let tape = Tape::new();
        let got = fn_contrastive_loss(tape.constant(zu), tape.constant(zv), &a, 0.5, false).unwrap();
        assert!((got.item() - want).abs() < 1e-12);
    }

    #[test]
    fn small_sigma_approaches_one_hot_weights() {
        // well separated: orthogonal-ish directions
        let zu = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let zv = normalize_rows(&array![[1.0, 0.1, 0.0], [0.0, 1.0, 0.1], [0.1, 0.0, 1.0]], 1e-12);
        let a = graph_of(&zu, &zv, 1e-3);
        let limit = brute_ncon(&zu, &zv, &Matrix::eye(3), 0.5);
        let got = ncon_value(&zu, &zv, &a, 0.5, false);
        assert!(((got - limit) / limit).abs() < 1e-3, "{got} vs {limit}");
    }

    #[test]
    fn two_view_total_is_four_terms() {
        let z = [unit(5, 3, 41), unit(5, 3, 42)];
        let cfg = ContrastiveConfig::default();
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = z.iter().map(|m| tape.constant(m.clone())).collect();
        let (total, _) = total_noise_contrastive(&vars, &cfg).unwrap();
        let term = |u: usize, v: usize| ncon_value(&z[u], &z[v], &graph_of(&z[u], &z[v], cfg.sigma), cfg.tau, false);
        let want = term(0, 1) + term(0, 0) + term(1, 0) + term(1, 1);
        assert!((total.item() - want).abs() < 1e-12);

        let swapped: Vec<Var<'_>> = vec![vars[1], vars[0]];
        let (other, _) = total_noise_contrastive(&swapped, &cfg).unwrap();
        assert!((other.item() - total.item()).abs() < 1e-12);
    }

    #[test]
    fn con_variant_uses_inter_view_terms_only() {
        let z = [unit(5, 3, 51), unit(5, 3, 52)];
        let cfg = ContrastiveConfig {
            variant: ContrastiveVariant::Con,
            ..Default::default()
        };
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = z.iter().map(|m| tape.constant(m.clone())).collect();
        let (total, _) = total_noise_contrastive(&vars, &cfg).unwrap();
        let a = standard_contrastive_loss(vars[0], vars[1], 0.5).unwrap().item();
        let b = standard_contrastive_loss(vars[1], vars[0], 0.5).unwrap().item();
        assert!((total.item() - (a + b)).abs() < 1e-12);
    }

    #[test]
    fn graphs_are_constants() {
        let z = [unit(4, 3, 61), unit(4, 3, 62)];
        let cfg = ContrastiveConfig::default();
        // the graph is rebuilt from perturbed inputs inside each evaluation,
        // so finite differences would see it move; compare against a fixed graph instead
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = z.iter().map(|m| tape.param(m.clone())).collect();
        let (total, _) = total_noise_contrastive(&vars, &cfg).unwrap();
        let grads = tape.backward(total);
        let fixed = |u: usize, v: usize| graph_of(&z[u], &z[v], cfg.sigma);
        let (_, g) = eval(&z, &|_, v: &[Var<'_>]| {
            let mut t = noise_contrastive_loss(v[0], v[1], &fixed(0, 1), 0.5, false).unwrap().0;
            t = t + noise_contrastive_loss(v[0], v[0], &fixed(0, 0), 0.5, false).unwrap().0;
            t = t + noise_contrastive_loss(v[1], v[0], &fixed(1, 0), 0.5, false).unwrap().0;
            t + noise_contrastive_loss(v[1], v[1], &fixed(1, 1), 0.5, false).unwrap().0
        });
        for (var, want) in vars.iter().zip(&g) {
            let got = grads.get(*var).unwrap();
            assert!((got - want).iter().all(|x| x.abs() < 1e-12));
        }
    }

    #[test]
    fn cluster_state_on_identical_points_is_uniform() {
        let fused = Matrix::from_elem((6, 4), 0.5);
        let state = build_cluster_state(&fused, 3, 0.5, 0, 3).unwrap();
        for &x in state.q.iter() {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cluster_state_finds_blobs() {
        let fused = array![[0.0, 0.0], [0.1, 0.1], [-0.1, 0.0], [4.0, 4.0], [4.1, 3.9], [3.9, 4.0]];
        let state = build_cluster_state(&fused, 2, 0.5, 1, 5).unwrap();
        let l = &state.pseudo_labels;
        assert!(l[0] == l[1] && l[1] == l[2] && l[3] == l[4] && l[4] == l[5] && l[0] != l[3]);
        // centers are member means
        let c = state.centers.row(l[3]);
        assert!((c[0] - 4.0).abs() < 1e-12 && (c[1] - 11.9 / 3.0).abs() < 1e-12);
        for row in state.q.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_centers_give_uniform_prediction() {
        let tape = Tape::new();
        let z = tape.constant(unit(4, 3, 71));
        let mu = tape.constant(Matrix::from_shape_fn((3, 3), |(i, _)| i as f64 * 0.3));
        let p = view_prediction(z, mu, 0.5).value();
        for &x in p.iter() {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn prediction_gradient() {
        let inputs = [unit(5, 4, 81), unit(4, 3, 82)];
        let err = finite_difference_check(
            &inputs,
            |t, v| {
                let w = t.constant(Matrix::from_shape_fn((5, 3), |(i, j)| (i * 3 + j) as f64 * 0.1 - 0.4));
                (view_prediction(v[0], v[1], 0.5) * w).sum()
            },
            1e-6,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn kl_scalar_case() {
        let p = array![[0.8, 0.2]];
        let q = array![[0.5, 0.5]];
        let want = 0.8 * 1.6f64.ln() + 0.2 * 0.4f64.ln();
        assert!((kl_divergence(&p, &q).unwrap() - want).abs() < 1e-15);
        let tape = Tape::new();
        let got = distillation_loss(&[tape.constant(p)], &q).unwrap();
        assert!((got.item() - want).abs() < 1e-15);
    }

    #[test]
    fn kl_zero_entries_and_shape() {
        assert_eq!(kl_divergence(&array![[1.0, 0.0]], &array![[1.0, 0.0]]).unwrap(), 0.0);
        assert!(kl_divergence(&array![[1.0, 0.0]], &array![[1.0], [0.0]]).is_err());
    }

    #[test]
    fn distillation_gradient() {
        let q = softmax_rows(&array![[0.2, -0.1, 0.4], [1.0, 0.0, -1.0], [0.0, 0.3, 0.3]]);
        let inputs = [
            unit(3, 4, 91),
            unit(3, 4, 92),
            Matrix::from_shape_fn((4, 3), |(i, j)| (i as f64 - j as f64) * 0.3),
        ];
        let err = finite_difference_check(
            &inputs,
            |_, v| {
                let p0 = view_prediction(v[0], v[2], 0.5);
                let p1 = view_prediction(v[1], v[2], 0.5);
                distillation_loss(&[p0, p1], &q).unwrap()
            },
            1e-6,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn distillation_converges_to_fixed_target() {
        let q = softmax_rows(&array![[1.0, -0.5], [-0.3, 0.8]]);
        let mut logits = Matrix::zeros((2, 2));
        for _ in 0..3000 {
            let (value, g) = eval(&[logits.clone()], &|_, v: &[Var<'_>]| {
                distillation_loss(&[v[0].softmax_rows()], &q).unwrap()
            });
            if value < 1e-6 {
                return;
            }
            logits -= &(&g[0] * 1.0);
        }
        panic!("distillation did not converge");
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(seed in 0u64..100_000, n in 1usize..5, k in 2usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = softmax_rows(&Matrix::from_shape_simple_fn((n, k), || rng.random_range(-3.0..3.0)));
            let q = softmax_rows(&Matrix::from_shape_simple_fn((n, k), || rng.random_range(-3.0..3.0)));
            prop_assert!(kl_divergence(&p, &q).unwrap() >= -1e-12);
            prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-12);
        }

        #[test]
        fn recon_mse_ignores_sample_order(seed in 0u64..10_000) {
            let a = unit(6, 3, seed);
            let b = unit(6, 3, seed + 1);
            let order = [3usize, 0, 5, 1, 4, 2];
            let tape = Tape::new();
            let x = mse(tape.constant(a.clone()), tape.constant(b.clone())).item();
            let y = mse(
                tape.constant(a.select(Axis(0), &order)),
                tape.constant(b.select(Axis(0), &order)),
            ).item();
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn alignment_undoes_a_relabelling() {
        let fused = array![
            [1.0, 0.0],
            [0.9, 0.1],
            [0.0, 1.0],
            [0.1, 0.9],
            [-1.0, 0.0],
            [-0.9, -0.1]
        ];
        let state = build_cluster_state(&fused, 3, 0.5, 0, 3).unwrap();
        let perm = [2, 0, 1];
        let inverse = [1, 2, 0];
        let mut shuffled = ClusterState {
            pseudo_labels: state.pseudo_labels.iter().map(|&l| perm[l]).collect(),
            centers: state.centers.select(Axis(0), &inverse),
            q: state.q.select(Axis(1), &inverse),
            tau_d: state.tau_d,
        };
        assert_ne!(shuffled.pseudo_labels, state.pseudo_labels);
        shuffled.align_to(&state).unwrap();
        assert_eq!(shuffled, state);
    }
}
