//! Training loop, evaluation and noise sweeps.
//!
//! One epoch:
//!
//! 1. if distillation is active (or prototype imputation needs labels),
//!    encode and impute the whole dataset, run k-means on the fused latents
//!    and rebuild the [`ClusterState`], keeping cluster ids consistent with
//!    the previous refresh;
//! 2. for every shuffled batch: encode observed views, reconstruct across
//!    views, impute missing latents, build reliability graphs, add the
//!    contrastive and distillation terms and take one Adam step;
//! 3. evaluate, if labels are known and the schedule asks for it.
//!
//! Everything is driven by seeded ChaCha streams, so a configuration and
//! seed reproduce the same loss trajectory bit for bit.

mod config;
mod sweep;

pub use config::{FinalClustering, TrainConfig};
pub use sweep::{equal_ratio_grid, sweep, SweepCell, SweepSummary, SweepTable, PRESET_RATIOS};

use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::cluster::{kmeans_best_of, MetricReport, DEFAULT_MAX_ITER};
use crate::data::MultiViewDataset;
use crate::error::{Error, Result};
use crate::imputation::{impute_all, impute_latents, ImputationConfig, ImputationStrategy, LatentBatch};
use crate::nn::{encode, Adam, Model};
use crate::objectives::{
    build_cluster_state, cross_view_recon_loss, distillation_loss, fuse, total_loss, total_noise_contrastive,
    view_prediction, ClusterState, LossBreakdown,
};

/// Losses and (optionally) metrics for one completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch means of each component.
    pub loss: LossBreakdown,
    pub metrics: Option<MetricReport>,
    pub batches: usize,
    /// Contrastive denominators that hit the log floor.
    pub floored: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset: String,
    pub config: TrainConfig,
    pub n_params: usize,
    pub epochs: Vec<EpochRecord>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn final_metrics(&self) -> Option<MetricReport> {
        self.epochs.last().and_then(|e| e.metrics)
    }

    /// Total loss per epoch.
    pub fn loss_trajectory(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss.total).collect()
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub record: RunRecord,
}

/// Settings that determine how a trained model is read out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub n_clusters: usize,
    pub imputation: ImputationConfig,
    pub tau_d: f64,
    pub restarts: usize,
    pub seed: u64,
    pub final_clustering: FinalClustering,
}

impl From<&TrainConfig> for EvalOptions {
    fn from(cfg: &TrainConfig) -> Self {
        Self {
            n_clusters: cfg.n_clusters,
            imputation: cfg.imputation_config(),
            tau_d: cfg.tau_d,
            restarts: cfg.kmeans_restarts,
            seed: cfg.seed,
            final_clustering: cfg.final_clustering,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Present when the dataset carries labels.
    pub metrics: Option<MetricReport>,
    pub predicted: Vec<usize>,
    /// `n × (V·d)` imputed, concatenated latents.
    pub fused: Matrix,
}

pub fn train(ds: &MultiViewDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(ds, cfg, |_| Ok(()))
}

/// [`train`] with a callback after every epoch, e.g. for streaming logs.
pub fn train_with(
    ds: &MultiViewDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    ds.validate()?;
    let n = ds.n_samples();
    if n < cfg.n_clusters {
        return Err(Error::InvalidArgument(format!(
            "{n} samples for {} clusters",
            cfg.n_clusters
        )));
    }
    if ds.n_views() < 2 {
        return Err(Error::InvalidArgument("training needs at least two views".into()));
    }
    let started = Instant::now();
    let mut model = Model::init(&cfg.network(), &ds.dims(), cfg.seed)?;
    let mut adam = Adam::new(cfg.adam(), model.tensors().iter().map(|t| t.dim()));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eval = EvalOptions::from(cfg);
    let mut record = RunRecord {
        dataset: ds.name.clone(),
        config: cfg.clone(),
        n_params: model.n_params(),
        epochs: Vec::with_capacity(cfg.epochs),
        wall_clock_secs: 0.0,
    };

    let mut state: Option<ClusterState> = None;
    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        if cfg.needs_cluster_state(epoch) {
            let mut fresh = refresh_cluster_state(&model, ds, cfg, epoch)?;
            if let Some(previous) = &state {
                fresh.align_to(previous)?;
            }
            state = Some(fresh);
        }
        let dist_on = cfg.use_dist && epoch >= cfg.warmup_epochs;

        let mut sums = [0.0f64; 3];
        let mut floored = 0;
        let batches = make_batches(n, cfg.batch_size, cfg.n_clusters, &mut rng);
        for (b, rows) in batches.iter().enumerate() {
            let rows = ensure_observed(ds, rows, &mut rng)?;
            let (loss, f) = step(&mut model, &mut adam, ds, &rows, cfg, state.as_ref(), dist_on)
                .map_err(|e| Error::Numerical(format!("epoch {epoch} batch {b}: {e}")))?;
            sums[0] += loss.crec;
            sums[1] += loss.ncon;
            sums[2] += loss.dist;
            floored += f;
        }
        let k = batches.len() as f64;
        let loss = LossBreakdown::new(sums[0] / k, sums[1] / k, sums[2] / k)?;

        let last = epoch + 1 == cfg.epochs;
        let scheduled = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0;
        let metrics = if ds.labels.is_some() && (last || scheduled) {
            evaluate(&model, ds, &eval)?.metrics
        } else {
            None
        };
        let rec = EpochRecord {
            epoch,
            loss,
            metrics,
            batches: batches.len(),
            floored,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: total {:.5} (crec {:.5} ncon {:.5} dist {:.5}){}",
            loss.total,
            loss.crec,
            loss.ncon,
            loss.dist,
            metrics.map_or(String::new(), |m| format!(
                " acc {:.4} nmi {:.4} ari {:.4}",
                m.acc, m.nmi, m.ari
            ))
        );
        on_epoch(&rec)?;
        record.epochs.push(rec);
    }
    record.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(TrainOutcome { model, record })
}

/// Shuffled batches; a final batch smaller than `2K` joins the previous one.
fn make_batches(n: usize, batch_size: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2 * k) {
        let tail = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(tail);
    }
    batches
}

/// Redraws a batch of the same size when some view has no observed sample
/// in it.
fn ensure_observed(ds: &MultiViewDataset, rows: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let covered = |rows: &[usize]| (0..ds.n_views()).all(|v| rows.iter().any(|&i| ds.mask[[i, v]]));
    if covered(rows) {
        return Ok(rows.to_vec());
    }
    for _ in 0..100 {
        let draw = index::sample(rng, ds.n_samples(), rows.len()).into_vec();
        if covered(&draw) {
            log::debug!("resampled a batch with an unobserved view");
            return Ok(draw);
        }
    }
    Err(Error::Imputation("could not draw a batch observing every view".into()))
}

fn step(
    model: &mut Model,
    adam: &mut Adam,
    ds: &MultiViewDataset,
    rows: &[usize],
    cfg: &TrainConfig,
    state: Option<&ClusterState>,
    dist_on: bool,
) -> Result<(LossBreakdown, usize)> {
    let tape = Tape::new();
    let bound = model.bind(&tape, true);
    let mask = ds.mask.select(Axis(0), rows);
    let n = rows.len();

    let mut inputs = Vec::with_capacity(ds.n_views());
    let mut latents = Vec::with_capacity(ds.n_views());
    for v in 0..ds.n_views() {
        let observed: Vec<usize> = (0..n).filter(|&i| mask[[i, v]]).collect();
        let x = tape.constant(ds.views[v].select(Axis(0), rows));
        let z = bound.encode(v, x.gather_rows(&observed)).index_add_rows(&observed, n);
        inputs.push(x);
        latents.push(z);
    }

    let crec = if cfg.use_crec {
        cross_view_recon_loss(&bound, &inputs, &latents, mask.view())?
    } else {
        tape.scalar(0.0)
    };

    let batch_labels = state.map(|s| rows.iter().map(|&i| s.pseudo_labels[i]).collect());
    let batch = LatentBatch::new(latents, mask)?.with_pseudo_labels(batch_labels);
    let completed = impute_all(&batch, &cfg.imputation_config())?;

    let mut floored = 0;
    let ncon = if cfg.use_ncon {
        let (loss, stats) = total_noise_contrastive(&completed.latents, &cfg.contrastive_config())?;
        floored = stats.floored;
        loss
    } else {
        tape.scalar(0.0)
    };

    let dist = match (dist_on, state) {
        (true, Some(state)) => {
            let q = state.q.select(Axis(0), rows);
            let predictions: Vec<Var<'_>> = completed
                .latents
                .iter()
                .zip(&bound.centers)
                .map(|(z, mu)| view_prediction(*z, *mu, cfg.tau_d))
                .collect();
            distillation_loss(&predictions, &q)?
        }
        _ => tape.scalar(0.0),
    };

    let (total, breakdown) = total_loss(crec, ncon, dist)?;
    let grads = tape.backward(total);
    let grads: Vec<Option<Matrix>> = bound.all.iter().map(|p| grads.get(*p).cloned()).collect();
    drop(bound);
    adam.step(model.tensors_mut(), &grads);
    Ok((breakdown, floored))
}

fn refresh_cluster_state(
    model: &Model,
    ds: &MultiViewDataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<ClusterState> {
    let seed = cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let completed = complete_latents(model, ds, &cfg.imputation_config(), seed, cfg.kmeans_restarts)?;
    build_cluster_state(&fuse(&completed), cfg.n_clusters, cfg.tau_d, seed, cfg.kmeans_restarts)
}

/// Unit latents of every observed slot; rows of unobserved slots are zero.
pub fn encode_dataset(model: &Model, ds: &MultiViewDataset) -> Result<Vec<Matrix>> {
    if model.view_dims() != ds.dims() {
        return Err(Error::Shape(format!(
            "model expects view dims {:?}, dataset has {:?}",
            model.view_dims(),
            ds.dims()
        )));
    }
    let n = ds.n_samples();
    let d = model.config.latent_dim;
    let mut out = Vec::with_capacity(ds.n_views());
    for (v, ae) in model.autoencoders.iter().enumerate() {
        let observed: Vec<usize> = (0..n).filter(|&i| ds.mask[[i, v]]).collect();
        let mut z = Array2::zeros((n, d));
        for chunk in observed.chunks(1024) {
            let enc = encode(ae, &ds.views[v].select(Axis(0), chunk))?;
            for (row, &i) in enc.outer_iter().zip(chunk) {
                z.row_mut(i).assign(&row);
            }
        }
        out.push(z);
    }
    Ok(out)
}

/// Encodes and imputes the whole dataset. Prototype imputation takes its
/// labels from k-means on a dual-attention completion of the same latents.
pub fn complete_latents(
    model: &Model,
    ds: &MultiViewDataset,
    cfg: &ImputationConfig,
    seed: u64,
    restarts: usize,
) -> Result<Vec<Matrix>> {
    let latents = encode_dataset(model, ds)?;
    if cfg.strategy != ImputationStrategy::Prototype {
        return impute_latents(&latents, &ds.mask, cfg, None);
    }
    let bootstrap = ImputationConfig {
        strategy: ImputationStrategy::DualAttention,
        ..*cfg
    };
    let fused = fuse(&impute_latents(&latents, &ds.mask, &bootstrap, None)?);
    let labels = kmeans_best_of(&fused, model.config.n_clusters, seed, restarts, DEFAULT_MAX_ITER)?.labels;
    impute_latents(&latents, &ds.mask, cfg, Some(&labels))
}

/// Encodes, imputes and fuses every sample, clusters the result and scores
/// it against the labels if there are any.
pub fn evaluate(model: &Model, ds: &MultiViewDataset, opts: &EvalOptions) -> Result<Evaluation> {
    let completed = complete_latents(model, ds, &opts.imputation, opts.seed, opts.restarts)?;
    let fused = fuse(&completed);
    let predicted = match opts.final_clustering {
        FinalClustering::FusedKmeans => {
            kmeans_best_of(&fused, opts.n_clusters, opts.seed, opts.restarts, DEFAULT_MAX_ITER)?.labels
        }
        FinalClustering::SoftAssignment => soft_assignment(model, &completed, opts.tau_d),
    };
    let metrics = match &ds.labels {
        Some(truth) => Some(MetricReport::compute(&predicted, truth)?),
        None => None,
    };
    Ok(Evaluation {
        metrics,
        predicted,
        fused,
    })
}

fn soft_assignment(model: &Model, latents: &[Matrix], tau_d: f64) -> Vec<usize> {
    let tape = Tape::new();
    let mut mean: Option<Matrix> = None;
    for (z, layer) in latents.iter().zip(&model.cluster_layers) {
        let p = view_prediction(tape.constant(z.clone()), tape.constant(layer.centers.clone()), tau_d).value();
        mean = Some(match mean {
            None => p,
            Some(m) => m + p,
        });
    }
    let mean = mean.expect("at least one view");
    mean.outer_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (j, &x)| if x > best.1 { (j, x) } else { best },
                )
                .0
        })
        .collect()
}
