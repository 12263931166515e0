//! Detector heads: simple feature pyramid, RoI-Align, region classifier
//! head, anchor-based proposals, and non-maximum suppression.

pub mod conv;
pub mod fpn;
pub mod nms;
pub mod rcnn;
pub mod roi;
pub mod rpn;

pub use fpn::{build_fpn, FeaturePyramid, FpnParams};
pub use nms::nms;
pub use rcnn::{rcnn_head_embed, rcnn_head_full, RcnnParams, RegionEmbedding};
pub use roi::{roi_align, roi_align_batch};
pub use rpn::{rpn_forward, rpn_loss, rpn_propose, rpn_targets, Proposal, RpnParams};
