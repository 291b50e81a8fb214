//! Per-view autoencoders, per-view cluster layers and their optimizer.

mod adam;
mod checkpoint;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::error::{Error, Result};

/// Guard added to row norms before normalizing latents.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub latent_dim: usize,
    /// Hidden widths of the four-layer encoder; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub n_clusters: usize,
}

impl NetworkConfig {
    pub fn new(n_clusters: usize) -> Self {
        Self {
            latent_dim: 128,
            hidden: vec![1024, 512, 256],
            activation: Activation::Relu,
            n_clusters,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 2 {
            return Err(Error::InvalidArgument(format!(
                "latent dimension must be at least 2, got {}",
                self.latent_dim
            )));
        }
        if self.hidden.len() != 3 || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "encoder needs three positive hidden widths, got {:?}",
                self.hidden
            )));
        }
        if self.n_clusters == 0 {
            return Err(Error::InvalidArgument("cluster count must be positive".into()));
        }
        Ok(())
    }
}

/// Affine layer `x · W + b` with `W: in × out`, `b: 1 × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    /// Uniform `±1/√fan_in` init for both weight and bias.
    fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |shape| Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..bound));
        let weight = draw((fan_in, fan_out));
        let bias = draw((1, fan_out));
        Self { weight, bias }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }
}

/// Fully connected stack; ReLU between layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    fn init(sizes: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let layers = sizes.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn n_params(&self) -> usize {
        self.tensors().map(|t| t.len()).sum()
    }

    /// `bound` holds this network's tensors on the tape, in [`Mlp::tensors`] order.
    fn forward<'t>(&self, bound: &[Var<'t>], x: Var<'t>) -> Var<'t> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, pair) in bound.chunks(2).enumerate() {
            h = h.matmul(pair[0]).add_row(pair[1]);
            if i < last {
                h = h.relu();
            }
        }
        h
    }
}

/// Encoder `E: ℝ^{d_v} → S^{d-1}` and mirrored decoder `D: ℝ^d → ℝ^{d_v}`
/// for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewAutoencoder {
    pub encoder: Mlp,
    pub decoder: Mlp,
}

impl ViewAutoencoder {
    pub fn input_dim(&self) -> usize {
        self.encoder.in_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.out_dim()
    }
}

/// Trainable per-view cluster centers, `d × K`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterLayer {
    pub centers: Matrix,
}

/// All trainable state: one autoencoder and one cluster layer per view.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: NetworkConfig,
    pub autoencoders: Vec<ViewAutoencoder>,
    pub cluster_layers: Vec<ClusterLayer>,
}

/// Builds the per-view networks deterministically from `seed`.
pub fn init_networks(
    cfg: &NetworkConfig,
    view_dims: &[usize],
    seed: u64,
) -> Result<(Vec<ViewAutoencoder>, Vec<ClusterLayer>)> {
    cfg.validate()?;
    if view_dims.contains(&0) {
        return Err(Error::InvalidArgument("view dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.latent_dim;
    let h = &cfg.hidden;
    let autoencoders = view_dims
        .iter()
        .map(|&dv| ViewAutoencoder {
            encoder: Mlp::init(&[dv, h[0], h[1], h[2], d], &mut rng),
            decoder: Mlp::init(&[d, h[2], h[1], h[0], dv], &mut rng),
        })
        .collect();
    let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("finite std");
    let cluster_layers = view_dims
        .iter()
        .map(|_| ClusterLayer {
            centers: Array2::from_shape_simple_fn((d, cfg.n_clusters), || normal.sample(&mut rng)),
        })
        .collect();
    Ok((autoencoders, cluster_layers))
}

impl Model {
    pub fn init(cfg: &NetworkConfig, view_dims: &[usize], seed: u64) -> Result<Self> {
        let (autoencoders, cluster_layers) = init_networks(cfg, view_dims, seed)?;
        Ok(Self {
            config: cfg.clone(),
            autoencoders,
            cluster_layers,
        })
    }

    pub fn n_views(&self) -> usize {
        self.autoencoders.len()
    }

    pub fn view_dims(&self) -> Vec<usize> {
        self.autoencoders.iter().map(|a| a.input_dim()).collect()
    }

    /// Every parameter tensor in a fixed order: per view encoder then
    /// decoder, then the cluster layers.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = Vec::new();
        for ae in &self.autoencoders {
            out.extend(ae.encoder.tensors());
            out.extend(ae.decoder.tensors());
        }
        out.extend(self.cluster_layers.iter().map(|c| &c.centers));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        for ae in &mut self.autoencoders {
            out.extend(ae.encoder.tensors_mut());
            out.extend(ae.decoder.tensors_mut());
        }
        out.extend(self.cluster_layers.iter_mut().map(|c| &mut c.centers));
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Puts every tensor on `tape`, as parameters or as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundModel<'t, '_> {
        let leaf = |m: &Matrix| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        let mut all = Vec::new();
        let mut encoders = Vec::new();
        let mut decoders = Vec::new();
        for ae in &self.autoencoders {
            let enc: Vec<Var<'t>> = ae.encoder.tensors().map(leaf).collect();
            let dec: Vec<Var<'t>> = ae.decoder.tensors().map(leaf).collect();
            all.extend(enc.iter().copied());
            all.extend(dec.iter().copied());
            encoders.push(enc);
            decoders.push(dec);
        }
        let centers: Vec<Var<'t>> = self.cluster_layers.iter().map(|c| leaf(&c.centers)).collect();
        all.extend(centers.iter().copied());
        BoundModel {
            model: self,
            encoders,
            decoders,
            centers,
            all,
        }
    }
}

/// A [`Model`] whose tensors live on a tape.
pub struct BoundModel<'t, 'm> {
    model: &'m Model,
    encoders: Vec<Vec<Var<'t>>>,
    decoders: Vec<Vec<Var<'t>>>,
    pub centers: Vec<Var<'t>>,
    /// Same order as [`Model::tensors`].
    pub all: Vec<Var<'t>>,
}

impl<'t> BoundModel<'t, '_> {
    /// Unit-norm latents of view `v`.
    pub fn encode(&self, v: usize, x: Var<'t>) -> Var<'t> {
        self.model.autoencoders[v]
            .encoder
            .forward(&self.encoders[v], x)
            .normalize_rows(NORM_EPS)
    }

    pub fn decode(&self, v: usize, z: Var<'t>) -> Var<'t> {
        self.model.autoencoders[v].decoder.forward(&self.decoders[v], z)
    }
}

fn check_cols(x: &Matrix, expected: usize, what: &str) -> Result<()> {
    if x.ncols() != expected {
        return Err(Error::Shape(format!(
            "{what} expects {expected} columns, got {}",
            x.ncols()
        )));
    }
    Ok(())
}

/// Unit-norm latents for a batch of view inputs.
pub fn encode(ae: &ViewAutoencoder, x: &Matrix) -> Result<Matrix> {
    check_cols(x, ae.input_dim(), "encoder")?;
    let tape = Tape::new();
    let bound: Vec<Var<'_>> = ae.encoder.tensors().map(|m| tape.constant(m.clone())).collect();
    let z = ae.encoder.forward(&bound, tape.constant(x.clone()));
    Ok(z.normalize_rows(NORM_EPS).value())
}

/// Reconstruction of view inputs from latents.
pub fn decode(ae: &ViewAutoencoder, z: &Matrix) -> Result<Matrix> {
    check_cols(z, ae.latent_dim(), "decoder")?;
    let tape = Tape::new();
    let bound: Vec<Var<'_>> = ae.decoder.tensors().map(|m| tape.constant(m.clone())).collect();
    Ok(ae.decoder.forward(&bound, tape.constant(z.clone())).value())
}
