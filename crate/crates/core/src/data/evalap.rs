//! COCO-style average precision: greedy score-ordered matching per IoU
//! threshold, 101-point interpolated precision-recall area, per-category
//! AP averaged into base and novel means.

use std::collections::BTreeMap;

use crate::boxes::NormBox;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct EvalDetection {
    pub box_: NormBox,
    pub category: String,
    pub score: f64,
}

#[derive(Clone, Debug, Default)]
pub struct ApSummary {
    /// AP at IoU 0.5 per category (categories with ground truth only).
    pub per_category_ap50: BTreeMap<String, f64>,
    /// Mean AP over the IoU thresholds per category.
    pub per_category_ap: BTreeMap<String, f64>,
    pub mean_ap50: f64,
    pub mean_ap: f64,
    pub base_ap50: f64,
    pub base_ap: f64,
    pub novel_ap50: f64,
    pub novel_ap: f64,
}

pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// AP for one category at one threshold, or `None` when it has no ground
/// truth anywhere (excluded from means, COCO-style).
fn category_ap(
    detections: &[(usize, usize, f64, NormBox)],
    gt_per_image: &[Vec<NormBox>],
    threshold: f64,
) -> Option<f64> {
    let n_gt: usize = gt_per_image.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b].2
            .total_cmp(&detections[a].2)
            .then(detections[a].0.cmp(&detections[b].0))
            .then(detections[a].1.cmp(&detections[b].1))
    });
    let mut matched: Vec<Vec<bool>> = gt_per_image.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut precisions = Vec::with_capacity(order.len());
    let mut recalls = Vec::with_capacity(order.len());
    for &di in &order {
        let (img, _, _, box_) = &detections[di];
        let mut best = (0.0f64, None);
        for (gi, g) in gt_per_image[*img].iter().enumerate() {
            if matched[*img][gi] {
                continue;
            }
            let iou = box_.iou(g);
            if iou > best.0 {
                best = (iou, Some(gi));
            }
        }
        match best {
            (iou, Some(gi)) if iou >= threshold => {
                matched[*img][gi] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        precisions.push(tp as f64 / (tp + fp) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }
    // 101-point interpolation: mean over r of max precision at recall >= r.
    let mut ap = 0.0;
    for step in 0..=100 {
        let r = step as f64 / 100.0;
        let p = precisions
            .iter()
            .zip(&recalls)
            .filter(|(_, &rec)| rec >= r - 1e-12)
            .map(|(&p, _)| p)
            .fold(0.0f64, f64::max);
        ap += p;
    }
    Some(ap / 101.0)
}

/// Evaluate detections against ground truth. `categories` fixes the known
/// universe and the base/novel split; detections outside it are an error.
pub fn eval_ap(
    detections: &[Vec<EvalDetection>],
    ground_truth: &[Vec<(NormBox, String)>],
    thresholds: &[f64],
    categories: &[(String, bool)],
) -> Result<ApSummary> {
    if detections.len() != ground_truth.len() {
        return Err(Error::Invalid(format!(
            "{} detection lists vs {} ground-truth lists",
            detections.len(),
            ground_truth.len()
        )));
    }
    if thresholds.is_empty() {
        return Err(Error::Invalid("no IoU thresholds".into()));
    }
    let known: BTreeMap<&str, bool> =
        categories.iter().map(|(n, novel)| (n.as_str(), *novel)).collect();
    for (img, dets) in detections.iter().enumerate() {
        for d in dets {
            if !d.score.is_finite() {
                return Err(Error::NonFinite(format!("detection score in image {img}")));
            }
            if !known.contains_key(d.category.as_str()) {
                return Err(Error::Invalid(format!("unknown category '{}' in detections", d.category)));
            }
        }
    }
    for gts in ground_truth {
        for (_, name) in gts {
            if !known.contains_key(name.as_str()) {
                return Err(Error::Invalid(format!("unknown category '{name}' in ground truth")));
            }
        }
    }

    let mut summary = ApSummary::default();
    let mut acc: BTreeMap<&str, (Vec<f64>, f64)> = BTreeMap::new(); // per cat: (per-threshold APs, ap50)
    for (name, _) in categories {
        let dets: Vec<(usize, usize, f64, NormBox)> = detections
            .iter()
            .enumerate()
            .flat_map(|(img, list)| {
                list.iter()
                    .enumerate()
                    .filter(|(_, d)| &d.category == name)
                    .map(move |(idx, d)| (img, idx, d.score, d.box_))
            })
            .collect();
        let gts: Vec<Vec<NormBox>> = ground_truth
            .iter()
            .map(|list| list.iter().filter(|(_, n)| n == name).map(|&(b, _)| b).collect())
            .collect();
        let mut aps = Vec::with_capacity(thresholds.len());
        let mut any = false;
        for &t in thresholds {
            match category_ap(&dets, &gts, t) {
                Some(ap) => {
                    aps.push(ap);
                    any = true;
                }
                None => break,
            }
        }
        if any {
            let ap50 = category_ap(&dets, &gts, 0.5).unwrap_or(0.0);
            acc.insert(name.as_str(), (aps, ap50));
        }
    }

    let mean = |values: &[f64]| {
        if values.is_empty() {
            0.0
        } else {
            values.iter().sum::<f64>() / values.len() as f64
        }
    };
    let mut all50 = Vec::new();
    let mut all = Vec::new();
    let mut base50 = Vec::new();
    let mut base = Vec::new();
    let mut novel50 = Vec::new();
    let mut novel = Vec::new();
    for (name, is_novel) in categories {
        let Some((aps, ap50)) = acc.get(name.as_str()) else { continue };
        let cat_ap = mean(aps);
        summary.per_category_ap50.insert(name.clone(), *ap50);
        summary.per_category_ap.insert(name.clone(), cat_ap);
        all50.push(*ap50);
        all.push(cat_ap);
        if *is_novel {
            novel50.push(*ap50);
            novel.push(cat_ap);
        } else {
            base50.push(*ap50);
            base.push(cat_ap);
        }
    }
    summary.mean_ap50 = mean(&all50);
    summary.mean_ap = mean(&all);
    summary.base_ap50 = mean(&base50);
    summary.base_ap = mean(&base);
    summary.novel_ap50 = mean(&novel50);
    summary.novel_ap = mean(&novel);
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> NormBox {
        NormBox::new(x0, y0, x1, y1).unwrap()
    }

    fn one_cat() -> Vec<(String, bool)> {
        vec![("red circle".to_string(), false)]
    }

    #[test]
    fn perfect_detection_scores_full_ap50() {
        let gt = vec![vec![(b(0.2, 0.2, 0.6, 0.6), "red circle".to_string())]];
        let dets = vec![vec![EvalDetection {
            box_: b(0.2, 0.2, 0.6, 0.6),
            category: "red circle".into(),
            score: 0.9,
        }]];
        let s = eval_ap(&dets, &gt, &[0.5], &one_cat()).unwrap();
        assert!((s.mean_ap50 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn low_iou_detection_scores_zero() {
        let gt = vec![vec![(b(0.2, 0.2, 0.6, 0.6), "red circle".to_string())]];
        // IoU 0.4 against the ground truth.
        let det_box = b(0.2, 0.2 + 0.171, 0.6, 0.6 + 0.171);
        assert!((det_box.iou(&gt[0][0].0) - 0.4).abs() < 0.02);
        let dets = vec![vec![EvalDetection { box_: det_box, category: "red circle".into(), score: 0.9 }]];
        let s = eval_ap(&dets, &gt, &[0.5], &one_cat()).unwrap();
        assert_eq!(s.mean_ap50, 0.0);
    }

    #[test]
    fn ranking_determines_ap_with_one_false_positive() {
        let gt = vec![vec![(b(0.2, 0.2, 0.6, 0.6), "red circle".to_string())]];
        let tp = EvalDetection { box_: b(0.2, 0.2, 0.6, 0.6), category: "red circle".into(), score: 0.9 };
        let fp = EvalDetection { box_: b(0.7, 0.7, 0.9, 0.9), category: "red circle".into(), score: 0.5 };

        // TP ranked first: precision envelope is 1 at every recall.
        let s = eval_ap(&[vec![tp.clone(), fp.clone()]], &gt, &[0.5], &one_cat()).unwrap();
        assert!((s.mean_ap50 - 1.0).abs() < 1e-12);

        // FP ranked first: precision at full recall is 0.5.
        let mut fp_hi = fp;
        fp_hi.score = 0.95;
        let s = eval_ap(&[vec![tp, fp_hi]], &gt, &[0.5], &one_cat()).unwrap();
        assert!((s.mean_ap50 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn score_monotone_transforms_do_not_change_ap() {
        let gt = vec![vec![
            (b(0.1, 0.1, 0.3, 0.3), "red circle".to_string()),
            (b(0.5, 0.5, 0.8, 0.8), "red circle".to_string()),
        ]];
        let dets = |f: &dyn Fn(f64) -> f64| {
            vec![vec![
                EvalDetection { box_: b(0.1, 0.1, 0.3, 0.3), category: "red circle".into(), score: f(0.8) },
                EvalDetection { box_: b(0.52, 0.5, 0.8, 0.82), category: "red circle".into(), score: f(0.4) },
                EvalDetection { box_: b(0.6, 0.1, 0.9, 0.4), category: "red circle".into(), score: f(0.6) },
            ]]
        };
        let a = eval_ap(&dets(&|s| s), &gt, &coco_thresholds(), &one_cat()).unwrap();
        let b_ = eval_ap(&dets(&|s| s * s * 10.0 + 1.0), &gt, &coco_thresholds(), &one_cat()).unwrap();
        assert_eq!(a.mean_ap, b_.mean_ap);
        assert_eq!(a.mean_ap50, b_.mean_ap50);
    }

    #[test]
    fn duplicate_detection_of_matched_gt_never_increases_ap() {
        let gt = vec![vec![(b(0.2, 0.2, 0.6, 0.6), "red circle".to_string())]];
        let tp = EvalDetection { box_: b(0.2, 0.2, 0.6, 0.6), category: "red circle".into(), score: 0.9 };
        let dup = EvalDetection { box_: b(0.2, 0.2, 0.6, 0.6), category: "red circle".into(), score: 0.85 };
        let base = eval_ap(&[vec![tp.clone()]], &gt, &coco_thresholds(), &one_cat()).unwrap();
        let with_dup = eval_ap(&[vec![tp, dup]], &gt, &coco_thresholds(), &one_cat()).unwrap();
        assert!(with_dup.mean_ap <= base.mean_ap + 1e-12);
    }

    #[test]
    fn unknown_detection_category_is_an_error() {
        let gt = vec![vec![(b(0.2, 0.2, 0.6, 0.6), "red circle".to_string())]];
        let dets = vec![vec![EvalDetection {
            box_: b(0.2, 0.2, 0.6, 0.6),
            category: "green ufo".into(),
            score: 0.9,
        }]];
        assert!(eval_ap(&dets, &gt, &[0.5], &one_cat()).is_err());
    }

    #[test]
    fn base_and_novel_means_split_correctly() {
        let cats = vec![("red circle".to_string(), false), ("blue square".to_string(), true)];
        let gt = vec![vec![
            (b(0.1, 0.1, 0.4, 0.4), "red circle".to_string()),
            (b(0.5, 0.5, 0.9, 0.9), "blue square".to_string()),
        ]];
        let dets = vec![vec![
            EvalDetection { box_: b(0.1, 0.1, 0.4, 0.4), category: "red circle".into(), score: 0.9 },
            // Miss the novel one.
            EvalDetection { box_: b(0.6, 0.1, 0.9, 0.3), category: "blue square".into(), score: 0.8 },
        ]];
        let s = eval_ap(&dets, &gt, &[0.5], &cats).unwrap();
        assert!((s.base_ap50 - 1.0).abs() < 1e-12);
        assert_eq!(s.novel_ap50, 0.0);
        assert!((s.mean_ap50 - 0.5).abs() < 1e-12);
    }
}
