//! Visual-text similarity heatmaps at pyramid-level-4 resolution: raw
//! backbone features versus features routed through the detector heads.

use std::path::Path;

use crate::boxes::NormBox;
use crate::heads::fpn::build_fpn;
use crate::heads::rcnn::rcnn_head_embed;
use crate::heads::roi::roi_align_batch;
use crate::ovd::backbone_tokens;
use crate::pretrain::dop::DopHeads;
use crate::pretrain::{encode_text, TextBatch, TextConfig, VlmParams, Vocab};
use crate::tensor::{FeatureGrid, Real, Tape, Tensor, Var};
use crate::vit::ViTConfig;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeatmapMode {
    /// Cosine of projected backbone tokens with the text embedding.
    Backbone,
    /// Each level-4 position's local window embedded through the region
    /// classifier head, then cosine with the text embedding.
    Dop,
}

pub struct HeatmapContext<'a, T: Real> {
    pub vlm: &'a VlmParams<Tensor<T>>,
    pub heads: &'a DopHeads<Tensor<T>>,
    pub vocab: &'a Vocab,
    pub text_cfg: TextConfig,
    /// Backbone view at heatmap resolution.
    pub vit_cfg: ViTConfig,
    pub swl_frozen: bool,
    pub shift: usize,
    pub roi_out: usize,
    pub samples_per_bin: usize,
    /// Side of the sliding local window, in level-4 cells.
    pub window_cells: usize,
}

/// Normalize raw similarities into `[0, 1]` for rendering; a spread below
/// the guard maps everything to 0.5.
fn normalize_unit<T: Real>(values: &mut [T]) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values.iter() {
        lo = lo.min(v.to_f64());
        hi = hi.max(v.to_f64());
    }
    let range = hi - lo;
    if range < 1e-6 {
        values.iter_mut().for_each(|v| *v = T::from_f64(0.5));
    } else {
        for v in values.iter_mut() {
            *v = T::from_f64((v.to_f64() - lo) / range);
        }
    }
}

/// Build the similarity map for one image and phrase. Output is
/// `[side, side, 1]` with values in `[0, 1]`, where `side` is the token
/// grid (= pyramid level 4) side.
pub fn similarity_heatmap<T: Real>(
    ctx: &HeatmapContext<'_, T>,
    image: &FeatureGrid<T>,
    phrase: &str,
    mode: HeatmapMode,
) -> Result<FeatureGrid<T>> {
    let mut tape = Tape::new();
    let text_params = ctx.vlm.text.map(&mut |t| tape.constant(t.clone()));
    let ids = ctx.vocab.encode(phrase)?;
    let batch = TextBatch::new(vec![ids], ctx.text_cfg.max_len)?;
    let text = encode_text(&mut tape, &batch, &text_params, &ctx.text_cfg)?;

    let vit = ctx.vlm.vit.map(&mut |t| tape.constant(t.clone()));
    let tokens = backbone_tokens(&mut tape, image, &vit, &ctx.vit_cfg, ctx.swl_frozen, ctx.shift)?;
    let side = tape.value(tokens).shape()[0];

    let sims: Var = match mode {
        HeatmapMode::Backbone => {
            let c = tape.value(tokens).shape()[2];
            let flat = tape.reshape(tokens, vec![side * side, c]);
            let proj = tape.matmul(flat, vit.img_proj);
            let unit = tape.l2_normalize_rows(proj)?;
            tape.matmul_nt(unit, text)
        }
        HeatmapMode::Dop => {
            let fpn = ctx.heads.fpn.map(&mut |t| tape.constant(t.clone()));
            let rcnn = ctx.heads.rcnn.map(&mut |t| tape.constant(t.clone()));
            let pyramid = build_fpn(&mut tape, tokens, &fpn)?;
            let level4 = pyramid.get(4);
            let half = ctx.window_cells as f64 / 2.0;
            let boxes: Vec<NormBox> = (0..side * side)
                .map(|p| {
                    let (i, j) = (p / side, p % side);
                    NormBox {
                        x0: (j as f64 + 0.5 - half) / side as f64,
                        y0: (i as f64 + 0.5 - half) / side as f64,
                        x1: (j as f64 + 0.5 + half) / side as f64,
                        y1: (i as f64 + 0.5 + half) / side as f64,
                    }
                    .clamped()
                })
                .collect();
            let rois = roi_align_batch(&mut tape, level4, &boxes, ctx.roi_out, ctx.samples_per_bin)?;
            let emb = rcnn_head_embed(&mut tape, rois, &rcnn)?;
            tape.matmul_nt(emb, text)
        }
    };
    let mut values = tape.value(sims).data().to_vec();
    normalize_unit(&mut values);
    FeatureGrid::new(side, side, 1, values)
}

/// Argmax cell center of a heatmap in normalized `(x, y)` coordinates.
pub fn heatmap_argmax<T: Real>(map: &FeatureGrid<T>) -> (f64, f64) {
    let mut best = f64::NEG_INFINITY;
    let mut at = (0usize, 0usize);
    for y in 0..map.height() {
        for x in 0..map.width() {
            let v = map.at(y, x, 0).to_f64();
            if v > best {
                best = v;
                at = (y, x);
            }
        }
    }
    (
        (at.1 as f64 + 0.5) / map.width() as f64,
        (at.0 as f64 + 0.5) / map.height() as f64,
    )
}

/// Write the heatmap as a grayscale PNG plus a red-channel overlay blended
/// onto the source image, both at image resolution.
pub fn save_heatmap_pngs<T: Real>(
    map: &FeatureGrid<T>,
    image_rgb: &FeatureGrid<T>,
    gray_path: &Path,
    overlay_path: &Path,
) -> Result<()> {
    let size = image_rgb.height();
    let scale = size / map.height();
    let mut gray = image::GrayImage::new(size as u32, size as u32);
    let mut overlay = image::RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let h = map.at((y / scale).min(map.height() - 1), (x / scale).min(map.width() - 1), 0).to_f64();
            gray.put_pixel(x as u32, y as u32, image::Luma([(h * 255.0) as u8]));
            let px = |c: usize| ((image_rgb.at(y, x, c).to_f64() + 0.5) * 255.0).clamp(0.0, 255.0);
            let r = (0.5 * px(0) + 0.5 * h * 255.0) as u8;
            let g = (0.5 * px(1)) as u8;
            let b = (0.5 * px(2)) as u8;
            overlay.put_pixel(x as u32, y as u32, image::Rgb([r, g, b]));
        }
    }
    gray.save(gray_path).map_err(|e| Error::Image(e.to_string()))?;
    overlay.save(overlay_path).map_err(|e| Error::Image(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_guard_flattens_tiny_ranges() {
        let mut v = vec![0.5f64, 0.5 + 1e-9, 0.5 - 1e-9];
        normalize_unit(&mut v);
        assert!(v.iter().all(|&x| (x - 0.5).abs() < 1e-12));
        let mut w = vec![0.0f64, 1.0, 2.0];
        normalize_unit(&mut w);
        assert_eq!(w, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn argmax_reports_cell_center() {
        let mut m = FeatureGrid::<f64>::zeros(4, 4, 1);
        m.set(1, 2, 0, 5.0);
        let (x, y) = heatmap_argmax(&m);
        assert!((x - 0.625).abs() < 1e-12);
        assert!((y - 0.375).abs() < 1e-12);
    }
}
