//! Detection-oriented image-text pretraining (DOP) and shifted-window
//! learning (SWL) for open-vocabulary detection, end to end on a desk-scale
//! synthetic benchmark: a minimal differentiable tensor core, a windowed
//! vision transformer, detector heads, the two-phase contrastive pretraining,
//! detection finetuning with frozen-backbone score ensembling, and a
//! COCO-style evaluator.

pub mod boxes;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod heads;
pub mod ovd;
pub(crate) mod params;
pub mod pretrain;
pub mod rng;
pub mod runner;
pub mod swl;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
