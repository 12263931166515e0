//! End-to-end open-vocabulary inference: proposals, region embeddings,
//! detection scores over the expanded category set, frozen-backbone VLM
//! scores, geometric ensembling, and per-class NMS.

use crate::boxes::{decode_deltas, NormBox};
use crate::heads::nms::nms;
use crate::heads::rpn::rpn_propose;
use crate::pretrain::VlmParams;
use crate::tensor::{FeatureGrid, Real, Tape, Tensor};
use crate::{Error, Result};

use super::categories::CategoryTable;
use super::scoring::{detection_score, ensemble_score, vlm_score, EnsembleParams, ScoredDetection};
use super::{backbone_tokens, detector_trunk, extract_rois, DetectionView, DetectorParams};

#[derive(Clone, Debug)]
pub struct DetectSettings {
    pub view: DetectionView,
    pub det_temp: f64,
    pub vlm_temp: f64,
    pub ensemble: EnsembleParams,
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub max_dets: usize,
    /// When false, VLM scores come from the finetuned backbone instead of
    /// the frozen one (the "without frozen backbone" ablation).
    pub use_frozen_vlm: bool,
    /// RoI size for the VLM pathway on the raw token grid.
    pub vlm_roi_out: usize,
}

/// Run the full detector on one image. Labels may be novel categories that
/// were never seen during finetuning.
pub fn detect<T: Real>(
    image: &FeatureGrid<T>,
    det: &DetectorParams<Tensor<T>>,
    frozen: &VlmParams<Tensor<T>>,
    table: &CategoryTable<T>,
    settings: &DetectSettings,
) -> Result<Vec<ScoredDetection>> {
    table.validate()?;
    if table.names.is_empty() {
        return Err(Error::Invalid("category table is empty".into()));
    }
    settings.ensemble.validate()?;
    let view = &settings.view;

    let mut tape = Tape::new();
    let det_b = det.map(&mut |t: &Tensor<T>| tape.constant(t.clone()));
    let (finetuned_tokens, pyramid, rpn_out) = detector_trunk(&mut tape, image, &det_b, view)?;
    let proposals = rpn_propose(
        &tape,
        &rpn_out,
        view.anchor_scale,
        view.rpn_pre_nms,
        view.rpn_post_nms,
        view.rpn_nms_iou,
    );
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let prop_boxes: Vec<NormBox> = proposals.iter().map(|p| p.box_).collect();

    let rois = extract_rois(&mut tape, &pyramid, &prop_boxes, view.roi_out, view.samples_per_bin)?;
    let (emb, deltas) = crate::heads::rcnn::rcnn_head_full(&mut tape, rois, &det_b.rcnn)?;

    // Refined, clipped output boxes.
    let delta_vals = tape.value(deltas).clone();
    let refined: Vec<NormBox> = prop_boxes
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let d = delta_vals.row(i);
            let dv = [d[0].to_f64(), d[1].to_f64(), d[2].to_f64(), d[3].to_f64()];
            decode_deltas(&dv, b)
        })
        .collect();

    // Detection path over the expanded table (background + base + novel).
    let cats = tape.constant(table.embeddings.clone());
    let p = detection_score(&mut tape, emb, det_b.background, cats, settings.det_temp)?;
    let p_vals = tape.value(p).clone();

    // VLM path per refined box.
    let (vlm_tokens, vlm_proj) = if settings.use_frozen_vlm {
        let frozen_vit = frozen.vit.map(&mut |t: &Tensor<T>| tape.constant(t.clone()));
        let tokens = backbone_tokens(
            &mut tape,
            image,
            &frozen_vit,
            &view.vit_cfg,
            view.swl.frozen,
            view.shift,
        )?;
        (tokens, frozen_vit.img_proj)
    } else {
        (finetuned_tokens, det_b.backbone.img_proj)
    };
    let k = table.names.len();
    let mut z_rows: Vec<Vec<f64>> = Vec::with_capacity(refined.len());
    for b in &refined {
        let z = vlm_score(
            &mut tape,
            vlm_tokens,
            vlm_proj,
            b,
            cats,
            settings.vlm_temp,
            settings.vlm_roi_out,
            view.samples_per_bin,
        )?;
        z_rows.push(tape.value(z).data().iter().map(|&v| v.to_f64()).collect());
    }

    // Ensemble and gather candidates above the score threshold.
    struct Candidate {
        box_: NormBox,
        cat: usize,
        p: f64,
        z: f64,
        s: f64,
    }
    let mut per_class: Vec<Vec<Candidate>> = (0..k).map(|_| Vec::new()).collect();
    for (i, box_) in refined.iter().enumerate() {
        let p_row: Vec<f64> = p_vals.row(i).iter().map(|&v| v.to_f64()).collect();
        let s = ensemble_score(&p_row, &z_rows[i], &settings.ensemble, &table.novel)?;
        for c in 0..k {
            if s[c + 1] >= settings.score_thresh {
                per_class[c].push(Candidate {
                    box_: *box_,
                    cat: c,
                    p: p_row[c + 1],
                    z: z_rows[i][c],
                    s: s[c + 1],
                });
            }
        }
    }

    let mut survivors: Vec<Candidate> = Vec::new();
    for cands in per_class {
        if cands.is_empty() {
            continue;
        }
        let boxes: Vec<NormBox> = cands.iter().map(|c| c.box_).collect();
        let scores: Vec<f64> = cands.iter().map(|c| c.s).collect();
        for idx in nms(&boxes, &scores, settings.nms_iou) {
            survivors.push(Candidate {
                box_: cands[idx].box_,
                cat: cands[idx].cat,
                p: cands[idx].p,
                z: cands[idx].z,
                s: cands[idx].s,
            });
        }
    }
    survivors.sort_by(|a, b| b.s.total_cmp(&a.s).then(a.cat.cmp(&b.cat)));
    survivors.truncate(settings.max_dets);
    Ok(survivors
        .into_iter()
        .map(|c| ScoredDetection {
            box_: c.box_,
            label: table.names[c.cat].clone(),
            p: c.p,
            z: c.z,
            s_ens: c.s,
        })
        .collect())
}
