//! k-means and external clustering metrics.

mod kmeans;
mod metrics;

pub use kmeans::{kmeans, kmeans_best_of, ClusteringResult, DEFAULT_MAX_ITER, DEFAULT_RESTARTS};
pub use metrics::{accuracy, ari, contingency, match_labels, nmi, MetricReport};
