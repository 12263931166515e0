//! Greedy non-maximum suppression.

use crate::boxes::NormBox;

/// Returns the kept indices: greedy by descending score, suppressing any box
/// whose IoU with an already-kept box exceeds `iou_threshold`. Score ties
/// break toward the lower original index.
pub fn nms(boxes: &[NormBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len());
    debug_assert!(scores.iter().all(|s| s.is_finite()), "nms requires finite scores");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.iter().all(|&k| boxes[k].iou(&boxes[i]) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}
