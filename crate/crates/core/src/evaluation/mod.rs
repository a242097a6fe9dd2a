//! Metrics, saliency, embedding projection, and plot rendering.

pub mod gradcam;
pub mod metrics;
pub mod plots;
pub mod tsne;

pub use gradcam::{default_layer, grad_cam_pp, SaliencyMap, LAYER_IDS};
pub use metrics::{compute_metrics, confusion, ClassMetrics, MetricsReport, RocPoint};
pub use tsne::{tsne_export, TsneConfig};
