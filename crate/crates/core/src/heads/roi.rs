//! RoI-Align: sub-cell pooling of a feature grid over a normalized box.
//! Each output bin averages a regular grid of bilinear samples.

use crate::boxes::NormBox;
use crate::tensor::{bilinear_terms, norm_to_cell, Real, Tape, Var};
use crate::{Error, Result};

/// Interpolation terms per output bin (row-major over `out_size x out_size`).
pub fn roi_align_terms<T: Real>(
    feat_h: usize,
    feat_w: usize,
    box_: &NormBox,
    out_size: usize,
    samples_per_bin: usize,
) -> Result<Vec<Vec<(u32, T)>>> {
    if out_size == 0 || samples_per_bin == 0 {
        return Err(Error::Invalid("roi_align needs out_size >= 1 and samples_per_bin >= 1".into()));
    }
    let y0 = norm_to_cell(box_.y0, feat_h);
    let y1 = norm_to_cell(box_.y1, feat_h);
    let x0 = norm_to_cell(box_.x0, feat_w);
    let x1 = norm_to_cell(box_.x1, feat_w);
    let bin_h = (y1 - y0) / out_size as f64;
    let bin_w = (x1 - x0) / out_size as f64;
    if bin_h <= 0.0 || bin_w <= 0.0 {
        return Err(Error::Invalid(format!("degenerate box {box_:?} after mapping to feature space")));
    }
    let spb = samples_per_bin as f64;
    let inv_count = 1.0 / (spb * spb);
    let mut bins = Vec::with_capacity(out_size * out_size);
    for by in 0..out_size {
        for bx in 0..out_size {
            let mut terms: Vec<(u32, T)> = Vec::with_capacity(4 * samples_per_bin * samples_per_bin);
            for sy in 0..samples_per_bin {
                let py = y0 + (by as f64 + (sy as f64 + 0.5) / spb) * bin_h;
                for sx in 0..samples_per_bin {
                    let px = x0 + (bx as f64 + (sx as f64 + 0.5) / spb) * bin_w;
                    for (cell, w) in bilinear_terms::<T>(feat_h, feat_w, py, px)? {
                        // Merge duplicate cells so the term list stays small.
                        let w = w * T::from_f64(inv_count);
                        if let Some(entry) = terms.iter_mut().find(|(c, _)| *c == cell) {
                            entry.1 = entry.1 + w;
                        } else {
                            terms.push((cell, w));
                        }
                    }
                }
            }
            bins.push(terms);
        }
    }
    Ok(bins)
}

/// Differentiable RoI-Align of one box over an `[h, w, c]` level grid,
/// producing `[out_size, out_size, c]`.
pub fn roi_align<T: Real>(
    tape: &mut Tape<T>,
    level: Var,
    box_: &NormBox,
    out_size: usize,
    samples_per_bin: usize,
) -> Result<Var> {
    let s = tape.value(level).shape().to_vec();
    assert_eq!(s.len(), 3, "roi_align expects [h, w, c]");
    let terms = roi_align_terms::<T>(s[0], s[1], box_, out_size, samples_per_bin)?;
    let flat = tape.cell_combine(level, &terms);
    Ok(tape.reshape(flat, vec![out_size, out_size, s[2]]))
}

/// RoI-Align for a batch of boxes on the same level, flattened per box to
/// `[n_boxes, out * out * c]` (the layout the region head consumes).
pub fn roi_align_batch<T: Real>(
    tape: &mut Tape<T>,
    level: Var,
    boxes: &[NormBox],
    out_size: usize,
    samples_per_bin: usize,
) -> Result<Var> {
    let s = tape.value(level).shape().to_vec();
    let mut all_terms = Vec::with_capacity(boxes.len() * out_size * out_size);
    for b in boxes {
        all_terms.extend(roi_align_terms::<T>(s[0], s[1], b, out_size, samples_per_bin)?);
    }
    let flat = tape.cell_combine(level, &all_terms); // [n * out * out, c]
    Ok(tape.reshape(flat, vec![boxes.len(), out_size * out_size * s[2]]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::Tensor;

    #[test]
    fn constant_map_fills_all_bins() {
        let mut tape = Tape::new();
        let level = tape.constant(Tensor::full(vec![6, 6, 3], 2.5f64));
        let b = NormBox::new(0.1, 0.2, 0.8, 0.9).unwrap();
        let out = roi_align(&mut tape, level, &b, 3, 2).unwrap();
        for &v in tape.value(out).data() {
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn whole_image_single_bin_on_2x2_is_center_sample() {
        let mut tape = Tape::<f64>::new();
        let level = tape.constant(Tensor::new(vec![2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]));
        let out = roi_align(&mut tape, level, &NormBox::whole_image(), 1, 1).unwrap();
        assert!((tape.value(out).data()[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn zero_out_size_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let level = tape.constant(Tensor::full(vec![4, 4, 1], 0.0f64));
        assert!(roi_align(&mut tape, level, &NormBox::whole_image(), 0, 1).is_err());
    }

    #[test]
    fn batch_layout_matches_single_calls() {
        let mut r = rng::stream(0, "roi-test");
        let level_t = rng::normal_tensor::<f64>(&mut r, vec![8, 8, 4], 1.0);
        let boxes = [
            NormBox::new(0.0, 0.0, 0.5, 0.5).unwrap(),
            NormBox::new(0.3, 0.4, 0.9, 0.8).unwrap(),
        ];
        let mut tape = Tape::new();
        let level = tape.constant(level_t);
        let batch = roi_align_batch(&mut tape, level, &boxes, 3, 2).unwrap();
        for (i, b) in boxes.iter().enumerate() {
            let single = roi_align(&mut tape, level, b, 3, 2).unwrap();
            let want = tape.value(single).data().to_vec();
            let got = tape.value(batch).row(i).to_vec();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn translation_by_one_cell_shifts_output() {
        // Shifting both the feature map (circularly, interior case) and the
        // box by one cell leaves the pooled values unchanged.
        let mut r = rng::stream(1, "roi-test");
        let level_t = rng::normal_tensor::<f64>(&mut r, vec![8, 8, 2], 1.0);
        let mut tape = Tape::new();
        let level = tape.constant(level_t);
        let b1 = NormBox::new(2.0 / 8.0, 2.0 / 8.0, 5.0 / 8.0, 5.0 / 8.0).unwrap();
        let out1 = roi_align(&mut tape, level, &b1, 2, 2).unwrap();
        let shifted = tape.roll2d(level, 1, 1);
        let b2 = NormBox::new(3.0 / 8.0, 3.0 / 8.0, 6.0 / 8.0, 6.0 / 8.0).unwrap();
        let out2 = roi_align(&mut tape, shifted, &b2, 2, 2).unwrap();
        for (a, b) in tape.value(out1).data().iter().zip(tape.value(out2).data()) {
            assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
        }
    }
}
