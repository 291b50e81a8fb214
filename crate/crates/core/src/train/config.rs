use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphNormalization;
use crate::imputation::{ImputationConfig, ImputationStrategy};
use crate::nn::{Activation, AdamConfig, NetworkConfig};
use crate::objectives::{ContrastiveConfig, ContrastiveVariant};

/// How the final cluster assignment is read off a trained model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinalClustering {
    /// k-means on the imputed, concatenated latents.
    #[default]
    FusedKmeans,
    /// Argmax of the view-averaged cluster-layer soft assignments.
    SoftAssignment,
}

/// Everything that determines a training run. Deserializes from partial
/// documents; missing keys take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_clusters: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub tau_c: f64,
    pub tau_d: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    /// Epochs before the distillation term switches on.
    pub warmup_epochs: usize,
    pub seed: u64,

    pub use_crec: bool,
    pub use_ncon: bool,
    pub use_dist: bool,
    pub contrastive: ContrastiveVariant,
    pub imputation: ImputationStrategy,
    pub knn_k: usize,
    pub graph_normalization: GraphNormalization,
    pub exclude_self_intra: bool,

    /// Evaluate every this many epochs when labels are known; 0 evaluates
    /// only after the last epoch.
    pub eval_every: usize,
    pub kmeans_restarts: usize,
    pub final_clustering: FinalClustering,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_clusters: 0,
            epochs: 100,
            batch_size: 1024,
            learning_rate: 2e-3,
            tau_c: 0.5,
            tau_d: 0.5,
            sigma: 0.07,
            alpha: 0.5,
            latent_dim: 128,
            hidden: vec![1024, 512, 256],
            warmup_epochs: 20,
            seed: 0,
            use_crec: true,
            use_ncon: true,
            use_dist: true,
            contrastive: ContrastiveVariant::Ours,
            imputation: ImputationStrategy::DualAttention,
            knn_k: 5,
            graph_normalization: GraphNormalization::Row,
            exclude_self_intra: false,
            eval_every: 1,
            kmeans_restarts: 10,
            final_clustering: FinalClustering::FusedKmeans,
        }
    }
}

impl TrainConfig {
    pub fn new(n_clusters: usize) -> Self {
        Self {
            n_clusters,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_clusters < 2 {
            return bad(format!("need at least 2 clusters, got {}", self.n_clusters));
        }
        if self.batch_size < 2 {
            return bad(format!("batch size must be at least 2, got {}", self.batch_size));
        }
        for (name, x) in [
            ("learning_rate", self.learning_rate),
            ("tau_c", self.tau_c),
            ("tau_d", self.tau_d),
            ("sigma", self.sigma),
        ] {
            if !(x > 0.0) || !x.is_finite() {
                return bad(format!("{name} must be positive, got {x}"));
            }
        }
        if self.kmeans_restarts == 0 {
            return bad("kmeans_restarts must be positive".into());
        }
        self.network().validate()?;
        self.imputation_config().validate()
    }

    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            latent_dim: self.latent_dim,
            hidden: self.hidden.clone(),
            activation: Activation::Relu,
            n_clusters: self.n_clusters,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }

    pub fn contrastive_config(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            variant: self.contrastive,
            tau: self.tau_c,
            sigma: self.sigma,
            normalization: self.graph_normalization,
            exclude_self_intra: self.exclude_self_intra,
        }
    }

    pub fn imputation_config(&self) -> ImputationConfig {
        ImputationConfig {
            alpha: self.alpha,
            sigma: self.sigma,
            strategy: self.imputation,
            knn_k: self.knn_k,
        }
    }

    /// Whether cluster targets must be refreshed at the start of `epoch`.
    pub fn needs_cluster_state(&self, epoch: usize) -> bool {
        (self.use_dist && epoch >= self.warmup_epochs) || self.imputation == ImputationStrategy::Prototype
    }

    /// Applies a method name as produced by [`Self::variant_label`]: `full`,
    /// or `+`-joined parts from `no-crec`, `no-ncon`, `no-dist`, `con`,
    /// `fncon`, `ours`, `direct`, `prototype`, `knn`, `dual-attention`.
    pub fn apply_variant(&mut self, label: &str) -> Result<()> {
        if label == "full" {
            return Ok(());
        }
        for part in label.split('+') {
            match part {
                "no-crec" => self.use_crec = false,
                "no-ncon" => self.use_ncon = false,
                "no-dist" => self.use_dist = false,
                "con" => self.contrastive = ContrastiveVariant::Con,
                "fncon" => self.contrastive = ContrastiveVariant::FnCon,
                "ours" => self.contrastive = ContrastiveVariant::Ours,
                "direct" => self.imputation = ImputationStrategy::Direct,
                "prototype" => self.imputation = ImputationStrategy::Prototype,
                "knn" => self.imputation = ImputationStrategy::Knn,
                "dual-attention" => self.imputation = ImputationStrategy::DualAttention,
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown method component `{other}` in `{label}`"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Short name for result tables.
    pub fn variant_label(&self) -> String {
        let mut parts = Vec::new();
        if !self.use_crec {
            parts.push("no-crec".to_string());
        }
        if !self.use_ncon {
            parts.push("no-ncon".to_string());
        }
        if !self.use_dist {
            parts.push("no-dist".to_string());
        }
        match self.contrastive {
            ContrastiveVariant::Ours => {}
            ContrastiveVariant::Con => parts.push("con".into()),
            ContrastiveVariant::FnCon => parts.push("fncon".into()),
        }
        match self.imputation {
            ImputationStrategy::DualAttention => {}
            ImputationStrategy::Direct => parts.push("direct".into()),
            ImputationStrategy::Prototype => parts.push("prototype".into()),
            ImputationStrategy::Knn => parts.push("knn".into()),
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::new(3);
        assert_eq!(
            (c.epochs, c.batch_size, c.warmup_epochs, c.latent_dim),
            (100, 1024, 20, 128)
        );
        assert_eq!(c.hidden, vec![1024, 512, 256]);
        assert_eq!(
            (c.tau_c, c.tau_d, c.sigma, c.alpha, c.learning_rate),
            (0.5, 0.5, 0.07, 0.5, 2e-3)
        );
        c.validate().unwrap();
        assert_eq!(c.variant_label(), "full");
    }

    #[test]
    fn partial_toml_keeps_defaults() {
        let c: TrainConfig =
            toml::from_str("n_clusters = 4\nepochs = 7\ncontrastive = \"fncon\"\nimputation = \"knn\"").unwrap();
        assert_eq!((c.n_clusters, c.epochs, c.batch_size), (4, 7, 1024));
        assert_eq!(c.variant_label(), "fncon+knn");
        assert!(toml::from_str::<TrainConfig>("nonsense = 1").is_err());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(TrainConfig::new(1).validate().is_err());
        let mut c = TrainConfig::new(3);
        c.alpha = 1.5;
        assert!(c.validate().is_err());
        c.alpha = 0.5;
        c.sigma = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn cluster_state_schedule() {
        let mut c = TrainConfig::new(3);
        assert!(!c.needs_cluster_state(19));
        assert!(c.needs_cluster_state(20));
        c.use_dist = false;
        assert!(!c.needs_cluster_state(50));
        c.imputation = ImputationStrategy::Prototype;
        assert!(c.needs_cluster_state(0));
    }

    #[test]
    fn variant_labels_round_trip() {
        for label in [
            "full",
            "no-crec",
            "no-ncon",
            "no-dist",
            "con",
            "fncon",
            "direct",
            "prototype",
            "knn",
            "no-dist+fncon+knn",
        ] {
            let mut c = TrainConfig::new(3);
            c.apply_variant(label).unwrap();
            assert_eq!(c.variant_label(), label);
        }
        assert!(TrainConfig::new(3).apply_variant("no-everything").is_err());
    }
}
