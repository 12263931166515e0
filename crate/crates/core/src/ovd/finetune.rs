//! Detection finetuning on base categories: RPN losses, classification
//! cross-entropy against the text-embedding classifier, and class-agnostic
//! box regression. Proposals that match no ground truth are background.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::boxes::{encode_deltas, NormBox};
use crate::heads::rpn::{all_anchors, rpn_loss, rpn_propose, rpn_targets};
use crate::pretrain::optim::SgdMomentum;
use crate::rng::{derive_seed, stream};
use crate::tensor::{FeatureGrid, Real, Tape, Tensor, Var};
use crate::{Error, Result};

use super::scoring::detection_logits;
use super::{detector_trunk, extract_rois, DetectionView, DetectorParams};

#[derive(Clone, Debug)]
pub struct FinetuneSetup {
    pub view: DetectionView,
    /// Softmax temperature of the classification logits.
    pub det_temp: f64,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub rpn_samples: usize,
    /// IoU at which a proposal adopts a ground-truth class.
    pub match_iou: f64,
    pub proposals_per_image: usize,
    /// Cap on the positive share of sampled proposals.
    pub pos_fraction: f64,
    pub backbone_lr_ratio: f64,
}

pub struct FinetuneExample<T> {
    pub image: FeatureGrid<T>,
    /// Ground truth restricted to base categories: (box, base-category index).
    pub gt: Vec<(NormBox, usize)>,
}

/// Match each proposal to the best ground truth at or above `iou_thresh`.
fn match_proposals(
    proposals: &[NormBox],
    gt: &[(NormBox, usize)],
    iou_thresh: f64,
) -> Vec<Option<usize>> {
    proposals
        .iter()
        .map(|p| {
            let mut best = (0.0f64, None);
            for (j, (g, _)) in gt.iter().enumerate() {
                let iou = p.iou(g);
                if iou > best.0 {
                    best = (iou, Some(j));
                }
            }
            if best.0 >= iou_thresh {
                best.1
            } else {
                None
            }
        })
        .collect()
}

/// One SGD step over a batch. Returns the mean loss.
pub fn finetune_step<T: Real>(
    det: &mut DetectorParams<Tensor<T>>,
    base_categories: &Tensor<T>,
    opt: &mut SgdMomentum<T>,
    batch: &[FinetuneExample<T>],
    setup: &FinetuneSetup,
    step_seed: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty finetune batch".into()));
    }
    let mut tape = Tape::new();
    let mut names: Vec<(String, Var)> = Vec::new();
    let bound = {
        let mut pairs = Vec::new();
        det.visit("det", &mut pairs);
        let mut iter = pairs.into_iter();
        det.map(&mut |t: &Tensor<T>| {
            let (name, _) = iter.next().expect("visit and map walk the same fields");
            let var = tape.leaf(t.clone());
            names.push((name, var));
            var
        })
    };
    let cats = tape.constant(base_categories.clone());

    let mut total: Option<Var> = None;
    for (img_idx, example) in batch.iter().enumerate() {
        let loss = image_loss(
            &mut tape,
            example,
            &bound,
            cats,
            setup,
            derive_seed(step_seed, &format!("finetune-image{img_idx}")),
        )?;
        total = Some(match total {
            Some(acc) => tape.add(acc, loss),
            None => loss,
        });
    }
    let total = total.expect("non-empty batch");
    let loss = tape.scale(total, T::from_usize(batch.len()).recip());
    let loss_val = tape.scalar_value(loss).to_f64();
    if !loss_val.is_finite() {
        return Err(Error::Diverged(format!(
            "finetune loss became {loss_val} at step {}",
            opt.step_count()
        )));
    }
    let grads = tape.backward(loss);
    let mut grad_map = BTreeMap::new();
    for (name, var) in &names {
        if let Some(g) = grads.try_get(*var) {
            grad_map.insert(name.clone(), g.clone());
        }
    }
    let ratio = setup.backbone_lr_ratio;
    let mut params = det.named_mut();
    opt.step(&mut params, &grad_map, &|name| {
        if name.starts_with("det.backbone") {
            ratio
        } else {
            1.0
        }
    });
    Ok(loss_val)
}

fn image_loss<T: Real>(
    tape: &mut Tape<T>,
    example: &FinetuneExample<T>,
    det: &DetectorParams<Var>,
    base_categories: Var,
    setup: &FinetuneSetup,
    seed: u64,
) -> Result<Var> {
    let view = &setup.view;
    let (_, pyramid, rpn_out) = detector_trunk(tape, &example.image, det, view)?;

    // RPN losses over sampled anchors.
    let level_sides: Vec<(u8, usize)> = pyramid
        .iter()
        .map(|(l, v)| (l, tape.value(v).shape()[0]))
        .collect();
    let anchors = all_anchors(&level_sides, view.anchor_scale);
    let gt_boxes: Vec<NormBox> = example.gt.iter().map(|&(b, _)| b).collect();
    let mut rng = stream(seed, "rpn-sample");
    let targets = rpn_targets(
        &anchors,
        &gt_boxes,
        setup.rpn_pos_iou,
        setup.rpn_neg_iou,
        setup.rpn_samples,
        &mut rng,
    );
    let rpn = rpn_loss(tape, &rpn_out, &targets)?;

    // Proposals (plus the ground-truth boxes, a standard training aid).
    let mut proposals: Vec<NormBox> = rpn_propose(
        tape,
        &rpn_out,
        view.anchor_scale,
        view.rpn_pre_nms,
        view.rpn_post_nms,
        view.rpn_nms_iou,
    )
    .into_iter()
    .map(|p| p.box_)
    .collect();
    proposals.extend(gt_boxes.iter().copied());

    // Sample a classification minibatch with a capped positive share.
    let matches = match_proposals(&proposals, &example.gt, setup.match_iou);
    let mut pos: Vec<usize> = (0..proposals.len()).filter(|&i| matches[i].is_some()).collect();
    let mut neg: Vec<usize> = (0..proposals.len()).filter(|&i| matches[i].is_none()).collect();
    let mut rng = stream(seed, "proposal-sample");
    let max_pos = ((setup.proposals_per_image as f64) * setup.pos_fraction).round() as usize;
    if pos.len() > max_pos {
        pos.shuffle(&mut rng);
        pos.truncate(max_pos);
    }
    let want_neg = setup.proposals_per_image.saturating_sub(pos.len());
    if neg.len() > want_neg {
        neg.shuffle(&mut rng);
        neg.truncate(want_neg);
    }
    pos.sort_unstable();
    neg.sort_unstable();
    let sampled: Vec<usize> = pos.iter().chain(neg.iter()).copied().collect();
    if sampled.is_empty() {
        return Ok(rpn);
    }

    let sampled_boxes: Vec<NormBox> = sampled.iter().map(|&i| proposals[i]).collect();
    let rois = extract_rois(tape, &pyramid, &sampled_boxes, view.roi_out, view.samples_per_bin)?;
    let (emb, deltas) = crate::heads::rcnn::rcnn_head_full(tape, rois, &det.rcnn)?;

    // Classification: background index 0, base category c at c + 1.
    let logits = detection_logits(tape, emb, det.background, base_categories, setup.det_temp)?;
    let labels: Vec<usize> = sampled
        .iter()
        .map(|&i| matches[i].map_or(0, |g| example.gt[g].1 + 1))
        .collect();
    let cls = tape.cross_entropy_rows(logits, &labels);

    let mut loss = tape.add(rpn, cls);

    // Class-agnostic box regression on the positives.
    if !pos.is_empty() {
        let pos_rows: Vec<usize> = sampled
            .iter()
            .enumerate()
            .filter(|(_, &i)| matches[i].is_some())
            .map(|(row, _)| row)
            .collect();
        let pos_deltas = tape.gather_rows(deltas, &pos_rows);
        let mut target = Tensor::zeros(vec![pos_rows.len(), 4]);
        for (r, &row) in pos_rows.iter().enumerate() {
            let prop_idx = sampled[row];
            let gt_idx = matches[prop_idx].expect("positive row");
            let d = encode_deltas(&example.gt[gt_idx].0, &proposals[prop_idx]);
            for k in 0..4 {
                target.set(&[r, k], T::from_f64(d[k]));
            }
        }
        let reg = tape.smooth_l1(pos_deltas, &target, T::one());
        loss = tape.add(loss, reg);
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unmatched_proposals_are_background() {
        let proposals = vec![
            NormBox::new(0.1, 0.1, 0.3, 0.3).unwrap(),
            NormBox::new(0.6, 0.6, 0.9, 0.9).unwrap(),
        ];
        let gt = vec![(NormBox::new(0.12, 0.1, 0.3, 0.32).unwrap(), 2usize)];
        let m = match_proposals(&proposals, &gt, 0.5);
        assert_eq!(m[0], Some(0));
        assert_eq!(m[1], None);
    }
}
