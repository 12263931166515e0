//! Synthetic benchmark data, evaluation, and visualization metrics.

pub mod evalap;
pub mod heatmap;
pub mod manifest;
pub mod metrics;
pub mod synth;

pub use evalap::{coco_thresholds, eval_ap, ApSummary, EvalDetection};
pub use heatmap::{heatmap_argmax, similarity_heatmap, HeatmapContext, HeatmapMode};
pub use manifest::{gen_synthetic_dataset, load_image, read_manifest, DatasetRecord};
pub use metrics::{pointing_game, retrieval_recall};
pub use synth::{CategoryDef, ShapeKind, SyntheticSpec};
