//! Minimal anchor-based region proposal network: one anchor scale per
//! pyramid level, three aspect ratios, a shared 3x3 conv trunk with
//! objectness and box-delta 1x1 heads.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::boxes::{decode_deltas, encode_deltas, NormBox};
use crate::params::param_fields;
use crate::rng;
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::Result;

use super::fpn::FeaturePyramid;
use super::nms::nms;

pub const ASPECT_RATIOS: [f64; 3] = [0.5, 1.0, 2.0];
pub const ANCHORS_PER_CELL: usize = ASPECT_RATIOS.len();

pub struct RpnParams<P> {
    pub conv_w: P,
    pub conv_b: P,
    pub obj_w: P,
    pub obj_b: P,
    pub delta_w: P,
    pub delta_b: P,
}

param_fields!(RpnParams, conv_w, conv_b, obj_w, obj_b, delta_w, delta_b);

impl<T: Real> RpnParams<Tensor<T>> {
    pub fn init(channels: usize, rng: &mut ChaCha12Rng) -> Self {
        let a = ANCHORS_PER_CELL;
        RpnParams {
            conv_w: rng::normal_tensor(rng, vec![9 * channels, channels], (9.0 * channels as f64).sqrt().recip()),
            conv_b: Tensor::zeros(vec![channels]),
            obj_w: rng::normal_tensor(rng, vec![channels, a], 0.01),
            obj_b: Tensor::zeros(vec![a]),
            delta_w: rng::normal_tensor(rng, vec![channels, 4 * a], 0.01),
            delta_b: Tensor::zeros(vec![4 * a]),
        }
    }
}

/// Anchors for one level: centers at cell centers, one scale (a multiple of
/// the cell stride), three aspect ratios. Row-major cells, aspects innermost.
pub fn level_anchors(side: usize, scale: f64) -> Vec<NormBox> {
    let stride = 1.0 / side as f64;
    let base = scale * stride;
    let mut anchors = Vec::with_capacity(side * side * ANCHORS_PER_CELL);
    for i in 0..side {
        for j in 0..side {
            let cy = (i as f64 + 0.5) * stride;
            let cx = (j as f64 + 0.5) * stride;
            for &aspect in &ASPECT_RATIOS {
                let h = base * aspect.sqrt();
                let w = base / aspect.sqrt();
                anchors.push(
                    NormBox { x0: cx - w * 0.5, y0: cy - h * 0.5, x1: cx + w * 0.5, y1: cy + h * 0.5 }
                        .clamped(),
                );
            }
        }
    }
    anchors
}

/// Per-level objectness logits `[cells * A]` and deltas `[cells * A, 4]`.
pub struct RpnLevelOutput {
    pub level: u8,
    pub obj_logits: Var,
    pub deltas: Var,
}

pub fn rpn_forward<T: Real>(
    tape: &mut Tape<T>,
    pyramid: &FeaturePyramid,
    params: &RpnParams<Var>,
) -> Vec<RpnLevelOutput> {
    let a = ANCHORS_PER_CELL;
    pyramid
        .iter()
        .map(|(level, feat)| {
            let h = super::conv::conv3x3(tape, feat, params.conv_w, params.conv_b);
            let h = tape.gelu(h);
            let s = tape.value(h).shape().to_vec();
            let cells = s[0] * s[1];
            let flat = tape.reshape(h, vec![cells, s[2]]);
            let obj = tape.matmul(flat, params.obj_w);
            let obj = tape.add_row(obj, params.obj_b);
            let obj_logits = tape.reshape(obj, vec![cells * a]);
            let dl = tape.matmul(flat, params.delta_w);
            let dl = tape.add_row(dl, params.delta_b); // [cells, 4a]
            // Re-lay into one row of 4 deltas per anchor.
            let mut idx = Vec::with_capacity(cells * a * 4);
            for cell in 0..cells {
                for an in 0..a {
                    for k in 0..4 {
                        idx.push((cell * 4 * a + an * 4 + k) as isize);
                    }
                }
            }
            let deltas = tape.gather_flat(dl, &idx, vec![cells * a, 4]);
            RpnLevelOutput { level, obj_logits, deltas }
        })
        .collect()
}

/// A scored proposal box.
#[derive(Clone, Debug)]
pub struct Proposal {
    pub box_: NormBox,
    pub objectness: f64,
}

/// Decode, clip, NMS and keep the `top_k` best proposals. Candidate order is
/// deterministic: descending score, then level, then anchor index.
pub fn rpn_propose<T: Real>(
    tape: &Tape<T>,
    outputs: &[RpnLevelOutput],
    anchor_scale: f64,
    pre_nms: usize,
    top_k: usize,
    nms_iou: f64,
) -> Vec<Proposal> {
    assert!(top_k >= 1, "top_k must be >= 1");
    let mut candidates: Vec<(f64, usize, NormBox)> = Vec::new();
    let mut flat_idx = 0usize;
    for out in outputs {
        let logits = tape.value(out.obj_logits);
        let deltas = tape.value(out.deltas);
        let cells = logits.numel() / ANCHORS_PER_CELL;
        let side = (cells as f64).sqrt().round() as usize;
        let anchors = level_anchors(side, anchor_scale);
        for (k, anchor) in anchors.iter().enumerate() {
            let logit = logits.data()[k].to_f64();
            let score = 1.0 / (1.0 + (-logit).exp());
            let d = deltas.row(k);
            let dv = [d[0].to_f64(), d[1].to_f64(), d[2].to_f64(), d[3].to_f64()];
            candidates.push((score, flat_idx, decode_deltas(&dv, anchor)));
            flat_idx += 1;
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    candidates.truncate(pre_nms);
    let boxes: Vec<NormBox> = candidates.iter().map(|c| c.2).collect();
    let scores: Vec<f64> = candidates.iter().map(|c| c.0).collect();
    let kept = nms(&boxes, &scores, nms_iou);
    kept.into_iter()
        .take(top_k)
        .map(|i| Proposal { box_: boxes[i], objectness: scores[i] })
        .collect()
}

/// Anchor labels for RPN training: positives by IoU >= `pos_iou` or by being
/// a ground-truth box's best anchor, negatives by IoU <= `neg_iou`, sampled
/// 1:1 up to `max_samples`.
pub struct RpnTargets {
    /// (global anchor index, label) with label 1.0 positive / 0.0 negative.
    pub sampled: Vec<(usize, f64)>,
    /// (global anchor index, encoded deltas) for the positives.
    pub box_targets: Vec<(usize, [f64; 4])>,
}

pub fn rpn_targets(
    anchors: &[NormBox],
    gt: &[NormBox],
    pos_iou: f64,
    neg_iou: f64,
    max_samples: usize,
    rng: &mut ChaCha12Rng,
) -> RpnTargets {
    let n = anchors.len();
    let mut label: Vec<i8> = vec![-1; n]; // -1 ignore, 0 neg, 1 pos
    let mut matched: Vec<usize> = vec![usize::MAX; n];

    if gt.is_empty() {
        label.iter_mut().for_each(|l| *l = 0);
    } else {
        for (i, a) in anchors.iter().enumerate() {
            let (mut best, mut best_j) = (0.0f64, 0usize);
            for (j, g) in gt.iter().enumerate() {
                let iou = a.iou(g);
                if iou > best {
                    best = iou;
                    best_j = j;
                }
            }
            if best >= pos_iou {
                label[i] = 1;
                matched[i] = best_j;
            } else if best <= neg_iou {
                label[i] = 0;
            }
        }
        // Every ground truth claims its best anchor.
        for (j, g) in gt.iter().enumerate() {
            let (mut best, mut best_i) = (-1.0f64, 0usize);
            for (i, a) in anchors.iter().enumerate() {
                let iou = a.iou(g);
                if iou > best {
                    best = iou;
                    best_i = i;
                }
            }
            if best > 0.0 {
                label[best_i] = 1;
                matched[best_i] = j;
            }
        }
    }

    let mut pos: Vec<usize> = (0..n).filter(|&i| label[i] == 1).collect();
    let mut neg: Vec<usize> = (0..n).filter(|&i| label[i] == 0).collect();
    let half = max_samples / 2;
    if pos.len() > half {
        pos.shuffle(rng);
        pos.truncate(half);
    }
    let want_neg = max_samples - pos.len().min(half);
    if neg.len() > want_neg {
        // Reservoir-free deterministic subsample: shuffle then truncate.
        neg.shuffle(rng);
        neg.truncate(want_neg);
    }
    pos.sort_unstable();
    neg.sort_unstable();

    let mut sampled = Vec::with_capacity(pos.len() + neg.len());
    let mut box_targets = Vec::with_capacity(pos.len());
    for &i in &pos {
        sampled.push((i, 1.0));
        box_targets.push((i, encode_deltas(&gt[matched[i]], &anchors[i])));
    }
    for &i in &neg {
        sampled.push((i, 0.0));
    }
    // Degenerate guard: no anchors at all.
    if sampled.is_empty() && n > 0 {
        sampled.push((rng.random_range(0..n), 0.0));
    }
    RpnTargets { sampled, box_targets }
}

/// Total anchors across levels, in the same global order used by
/// `rpn_forward` outputs and `rpn_propose`.
pub fn all_anchors(level_sides: &[(u8, usize)], anchor_scale: f64) -> Vec<NormBox> {
    let mut out = Vec::new();
    for &(_, side) in level_sides {
        out.extend(level_anchors(side, anchor_scale));
    }
    out
}

/// RPN training loss: BCE on sampled anchors plus smooth-L1 on positives.
pub fn rpn_loss<T: Real>(
    tape: &mut Tape<T>,
    outputs: &[RpnLevelOutput],
    targets: &RpnTargets,
) -> Result<Var> {
    // Concatenate per-level logits/deltas into the global anchor order.
    let logit_parts: Vec<Var> = outputs
        .iter()
        .map(|o| {
            let n = tape.value(o.obj_logits).numel();
            tape.reshape(o.obj_logits, vec![n, 1])
        })
        .collect();
    let logits = tape.concat_rows(&logit_parts);
    let delta_parts: Vec<Var> = outputs.iter().map(|o| o.deltas).collect();
    let deltas = tape.concat_rows(&delta_parts);

    let sel: Vec<usize> = targets.sampled.iter().map(|&(i, _)| i).collect();
    let sel_logits = tape.gather_rows(logits, &sel);
    let labels = Tensor::new(
        vec![sel.len(), 1],
        targets.sampled.iter().map(|&(_, l)| T::from_f64(l)).collect(),
    );
    let weights = Tensor::full(vec![sel.len(), 1], T::one());
    let cls = tape.bce_logits(sel_logits, &labels, &weights);

    if targets.box_targets.is_empty() {
        return Ok(cls);
    }
    let pos: Vec<usize> = targets.box_targets.iter().map(|&(i, _)| i).collect();
    let pos_deltas = tape.gather_rows(deltas, &pos);
    let mut tgt = Tensor::zeros(vec![pos.len(), 4]);
    for (r, (_, d)) in targets.box_targets.iter().enumerate() {
        for k in 0..4 {
            tgt.set(&[r, k], T::from_f64(d[k]));
        }
    }
    let reg = tape.smooth_l1(pos_deltas, &tgt, T::from_f64(1.0 / 9.0));
    Ok(tape.add(cls, reg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::fpn::{build_fpn, FpnParams};

    #[test]
    fn anchor_count_is_cells_times_aspects() {
        let anchors = level_anchors(8, 4.0);
        assert_eq!(anchors.len(), 8 * 8 * 3);
    }

    #[test]
    fn top_k_bounds_proposal_count() {
        let mut r = rng::stream(0, "rpn-test");
        let fpn = FpnParams::<Tensor<f64>>::init(8, 6, &mut r);
        let rpn = RpnParams::<Tensor<f64>>::init(6, &mut r);
        let tokens_t = rng::normal_tensor::<f64>(&mut r, vec![8, 8, 8], 1.0);
        let mut tape = Tape::new();
        let fv = fpn.map(&mut |t| tape.constant(t.clone()));
        let rv = rpn.map(&mut |t| tape.constant(t.clone()));
        let tokens = tape.constant(tokens_t);
        let pyr = build_fpn(&mut tape, tokens, &fv).unwrap();
        let outs = rpn_forward(&mut tape, &pyr, &rv);
        let props = rpn_propose(&tape, &outs, 4.0, 200, 5, 0.7);
        assert!(props.len() <= 5);
        assert!(!props.is_empty());
    }

    #[test]
    fn zero_heads_keep_first_anchors_in_tiebreak_order() {
        let mut r = rng::stream(1, "rpn-test");
        let fpn = FpnParams::<Tensor<f64>>::init(8, 6, &mut r);
        let mut rpn = RpnParams::<Tensor<f64>>::init(6, &mut r);
        rpn.obj_w = Tensor::zeros(vec![6, 3]);
        rpn.obj_b = Tensor::zeros(vec![3]);
        rpn.delta_w = Tensor::zeros(vec![6, 12]);
        rpn.delta_b = Tensor::zeros(vec![12]);
        let tokens_t = rng::normal_tensor::<f64>(&mut r, vec![8, 8, 8], 1.0);
        let mut tape = Tape::new();
        let fv = fpn.map(&mut |t| tape.constant(t.clone()));
        let rv = rpn.map(&mut |t| tape.constant(t.clone()));
        let tokens = tape.constant(tokens_t);
        let pyr = build_fpn(&mut tape, tokens, &fv).unwrap();
        let outs = rpn_forward(&mut tape, &pyr, &rv);
        let props = rpn_propose(&tape, &outs, 4.0, 10_000, 4, 0.7);

        // Uniform scores, zero deltas: the documented tie-break walks the
        // anchors in global order and NMS keeps the survivors greedily.
        let sides: Vec<(u8, usize)> = vec![(2, 32), (3, 16), (4, 8), (5, 4)];
        let anchors = all_anchors(&sides, 4.0);
        let mut expect = Vec::new();
        for b in anchors {
            if expect.iter().all(|k: &NormBox| k.iou(&b) <= 0.7) {
                expect.push(b);
            }
            if expect.len() == 4 {
                break;
            }
        }
        for (p, e) in props.iter().zip(&expect) {
            assert!((p.box_.x0 - e.x0).abs() < 1e-12);
            assert!((p.box_.y0 - e.y0).abs() < 1e-12);
        }
    }

    #[test]
    fn no_ground_truth_labels_everything_negative() {
        let anchors = level_anchors(4, 4.0);
        let mut r = rng::stream(2, "rpn-test");
        let t = rpn_targets(&anchors, &[], 0.7, 0.3, 16, &mut r);
        assert!(!t.sampled.is_empty());
        assert!(t.sampled.iter().all(|&(_, l)| l == 0.0));
        assert!(t.box_targets.is_empty());
    }

    #[test]
    fn best_anchor_per_gt_is_positive() {
        let anchors = level_anchors(8, 4.0);
        let gt = vec![NormBox::new(0.2, 0.2, 0.7, 0.7).unwrap()];
        let mut r = rng::stream(3, "rpn-test");
        let t = rpn_targets(&anchors, &gt, 0.7, 0.3, 64, &mut r);
        assert!(t.sampled.iter().any(|&(_, l)| l == 1.0));
        assert!(!t.box_targets.is_empty());
    }
}
