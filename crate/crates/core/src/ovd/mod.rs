//! Open-vocabulary detection: finetuning on base categories and inference
//! that ensembles detector scores with frozen-backbone VLM scores.

pub mod categories;
pub mod detect;
pub mod finetune;
pub mod scoring;

pub use categories::{category_embeddings, init_background, CategoryTable};
pub use detect::{detect, DetectSettings};
pub use finetune::{finetune_step, FinetuneExample, FinetuneSetup};
pub use scoring::{detection_score, ensemble_score, vlm_score, EnsembleParams, ScoredDetection};

use crate::boxes::NormBox;
use crate::heads::fpn::{build_fpn, FeaturePyramid, FpnParams};
use crate::heads::rcnn::RcnnParams;
use crate::heads::roi::roi_align_batch;
use crate::heads::rpn::RpnParams;
use crate::swl::{swl_forward, SwlConfig};
use crate::tensor::{FeatureGrid, Real, Tape, Tensor, Var};
use crate::vit::{patchify, vit_forward, ViTConfig, ViTParams};
use crate::Result;

/// The finetuned detector: backbone, pyramid, region head, proposal network
/// and the learnable background embedding.
pub struct DetectorParams<P> {
    pub backbone: ViTParams<P>,
    pub fpn: FpnParams<P>,
    pub rcnn: RcnnParams<P>,
    pub rpn: RpnParams<P>,
    pub background: P,
}

impl<P> DetectorParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> DetectorParams<Q> {
        DetectorParams {
            backbone: self.backbone.map(f),
            fpn: self.fpn.map(f),
            rcnn: self.rcnn.map(f),
            rpn: self.rpn.map(f),
            background: f(&self.background),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a P)>) {
        self.backbone.visit(&format!("{prefix}.backbone"), out);
        self.fpn.visit(&format!("{prefix}.fpn"), out);
        self.rcnn.visit(&format!("{prefix}.rcnn"), out);
        self.rpn.visit(&format!("{prefix}.rpn"), out);
        out.push((format!("{prefix}.background"), &self.background));
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut P)>) {
        self.backbone.visit_mut(&format!("{prefix}.backbone"), out);
        self.fpn.visit_mut(&format!("{prefix}.fpn"), out);
        self.rcnn.visit_mut(&format!("{prefix}.rcnn"), out);
        self.rpn.visit_mut(&format!("{prefix}.rpn"), out);
        out.push((format!("{prefix}.background"), &mut self.background));
    }
}

impl<T: Real> DetectorParams<Tensor<T>> {
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_mut("det", &mut out);
        out
    }
}

/// Geometry shared by finetuning and inference.
#[derive(Clone, Debug)]
pub struct DetectionView {
    pub vit_cfg: ViTConfig,
    pub swl: SwlConfig,
    /// Token shift for SWL (`s = round(q M)`).
    pub shift: usize,
    pub roi_out: usize,
    pub samples_per_bin: usize,
    pub anchor_scale: f64,
    pub rpn_pre_nms: usize,
    pub rpn_post_nms: usize,
    pub rpn_nms_iou: f64,
}

/// Backbone forward at detection resolution, with SWL when enabled.
pub fn backbone_tokens<T: Real>(
    tape: &mut Tape<T>,
    image: &FeatureGrid<T>,
    vit: &ViTParams<Var>,
    cfg: &ViTConfig,
    swl_enabled: bool,
    shift: usize,
) -> Result<Var> {
    let tokens = patchify(tape, image, vit, cfg, None)?;
    if swl_enabled {
        swl_forward(tape, tokens, shift, |tape, v| vit_forward(tape, v, vit, cfg))
    } else {
        vit_forward(tape, tokens, vit, cfg)
    }
}

/// Pyramid level for a box by its normalized size (larger boxes pool from
/// coarser levels).
pub fn assign_level(box_: &NormBox) -> u8 {
    let s = box_.area().sqrt();
    let lvl = (4.0 + (2.0 * s).log2()).floor();
    lvl.clamp(2.0, 5.0) as u8
}

/// RoI features for a mixed-level set of boxes, rows in the original box
/// order. Returns `[n, roi_out^2 * c]`.
pub fn extract_rois<T: Real>(
    tape: &mut Tape<T>,
    pyramid: &FeaturePyramid,
    boxes: &[NormBox],
    roi_out: usize,
    samples_per_bin: usize,
) -> Result<Var> {
    let levels: Vec<u8> = boxes.iter().map(assign_level).collect();
    let mut parts = Vec::new();
    let mut order: Vec<usize> = Vec::with_capacity(boxes.len());
    for level in crate::heads::fpn::LEVELS {
        let idx: Vec<usize> = (0..boxes.len()).filter(|&i| levels[i] == level).collect();
        if idx.is_empty() {
            continue;
        }
        let lvl_boxes: Vec<NormBox> = idx.iter().map(|&i| boxes[i]).collect();
        parts.push(roi_align_batch(tape, pyramid.get(level), &lvl_boxes, roi_out, samples_per_bin)?);
        order.extend(idx);
    }
    let stacked = tape.concat_rows(&parts);
    let mut inverse = vec![0usize; boxes.len()];
    for (pos, &orig) in order.iter().enumerate() {
        inverse[orig] = pos;
    }
    Ok(tape.gather_rows(stacked, &inverse))
}

/// Detector forward shared by training and inference: backbone, pyramid and
/// proposal head.
pub fn detector_trunk<T: Real>(
    tape: &mut Tape<T>,
    image: &FeatureGrid<T>,
    det: &DetectorParams<Var>,
    view: &DetectionView,
) -> Result<(Var, FeaturePyramid, Vec<crate::heads::rpn::RpnLevelOutput>)> {
    let tokens = backbone_tokens(tape, image, &det.backbone, &view.vit_cfg, view.swl.finetuned, view.shift)?;
    let pyramid = build_fpn(tape, tokens, &det.fpn)?;
    let rpn_out = crate::heads::rpn::rpn_forward(tape, &pyramid, &det.rpn);
    Ok((tokens, pyramid, rpn_out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_assignment_tracks_box_size() {
        let tiny = NormBox::new(0.4, 0.4, 0.47, 0.47).unwrap();
        let small = NormBox::new(0.2, 0.2, 0.45, 0.45).unwrap();
        let medium = NormBox::new(0.2, 0.2, 0.7, 0.7).unwrap();
        let huge = NormBox::whole_image();
        assert_eq!(assign_level(&tiny), 2);
        assert_eq!(assign_level(&small), 3);
        assert_eq!(assign_level(&medium), 4);
        assert_eq!(assign_level(&huge), 5);
    }
}
