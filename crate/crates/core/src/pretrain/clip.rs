//! Phase 1: standard contrastive pretraining of the dual encoders with
//! cropped positional embeddings and global-average-pooled image embeddings.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::boxes::NormBox;
use crate::rng;
use crate::tensor::{FeatureGrid, Real, Tape, Tensor, Var};
use crate::vit::{patchify, pool_image_embedding, vit_forward, ViTConfig};
use crate::{Error, Result};

use super::contrastive::info_nce;
use super::optim::AdamW;
use super::text::{encode_text, TextBatch, TextConfig};
use super::VlmParams;

#[derive(Clone, Debug)]
pub struct ClipSetup {
    /// Backbone view for this phase (pretraining resolution, global attention).
    pub vit_cfg: ViTConfig,
    pub text_cfg: TextConfig,
    pub crop_scale: (f64, f64),
    pub crop_aspect: (f64, f64),
}

pub struct ClipBatch<T> {
    pub images: Vec<FeatureGrid<T>>,
    pub texts: TextBatch,
}

fn uniform(rng: &mut ChaCha12Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Crop box for the positional-embedding table: scale and aspect drawn
/// uniformly, center placed so the crop stays inside the unit square.
pub fn sample_pos_crop(rng: &mut ChaCha12Rng, scale: (f64, f64), aspect: (f64, f64)) -> NormBox {
    let u = uniform(rng, scale.0, scale.1);
    let a = uniform(rng, aspect.0, aspect.1);
    let h = (u * a.sqrt()).clamp(0.05, 1.0);
    let w = (u / a.sqrt()).clamp(0.05, 1.0);
    let cy = uniform(rng, h / 2.0, 1.0 - h / 2.0);
    let cx = uniform(rng, w / 2.0, 1.0 - w / 2.0);
    NormBox { x0: cx - w / 2.0, y0: cy - h / 2.0, x1: cx + w / 2.0, y1: cy + h / 2.0 }
}

/// Image tower forward for one image: patchify (with optional PE crop),
/// backbone, pooled unit-norm embedding.
pub fn image_embedding<T: Real>(
    tape: &mut Tape<T>,
    image: &FeatureGrid<T>,
    params: &crate::vit::ViTParams<Var>,
    cfg: &ViTConfig,
    crop: Option<NormBox>,
) -> Result<Var> {
    let tokens = patchify(tape, image, params, cfg, crop)?;
    let out = vit_forward(tape, tokens, params, cfg)?;
    pool_image_embedding(tape, out, params.img_proj)
}

/// Contrastive loss over one batch; crops are drawn from `step_seed`.
pub fn clip_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &VlmParams<Var>,
    batch: &ClipBatch<T>,
    setup: &ClipSetup,
    step_seed: u64,
) -> Result<Var> {
    if batch.images.len() != batch.texts.batch() || batch.images.is_empty() {
        return Err(Error::Invalid(format!(
            "batch mismatch: {} images vs {} texts",
            batch.images.len(),
            batch.texts.batch()
        )));
    }
    let mut crop_rng = rng::stream(step_seed, "clip-pos-crop");
    let mut img_rows = Vec::with_capacity(batch.images.len());
    for image in &batch.images {
        let crop = sample_pos_crop(&mut crop_rng, setup.crop_scale, setup.crop_aspect);
        img_rows.push(image_embedding(tape, image, &model.vit, &setup.vit_cfg, Some(crop))?);
    }
    let img = tape.concat_rows(&img_rows);
    let txt = encode_text(tape, &batch.texts, &model.text, &setup.text_cfg)?;
    info_nce(tape, img, txt, model.head.log_tau)
}

/// One AdamW step on the full dual encoder. Returns the loss.
pub fn clip_pretrain_step<T: Real>(
    model: &mut VlmParams<Tensor<T>>,
    opt: &mut AdamW<T>,
    batch: &ClipBatch<T>,
    setup: &ClipSetup,
    step_seed: u64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut names: Vec<(String, Var)> = Vec::new();
    let bound = {
        let mut pairs = Vec::new();
        model.visit("vlm", &mut pairs);
        let mut iter = pairs.into_iter();
        model.map(&mut |t: &Tensor<T>| {
            let (name, _) = iter.next().expect("visit and map walk the same fields");
            let var = tape.leaf(t.clone());
            names.push((name, var));
            var
        })
    };
    let loss = clip_loss(&mut tape, &bound, batch, setup, step_seed)?;
    let loss_val = tape.scalar_value(loss).to_f64();
    if !loss_val.is_finite() {
        return Err(Error::Diverged(format!("clip loss became {loss_val} at step {}", opt.step_count())));
    }
    let grads = tape.backward(loss);
    let mut grad_map = std::collections::BTreeMap::new();
    for (name, var) in &names {
        if let Some(g) = grads.try_get(*var) {
            grad_map.insert(name.clone(), g.clone());
        }
    }
    let mut params = model.named_mut();
    opt.step(&mut params, &grad_map);
    model.head.clamp_tau();
    Ok(loss_val)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pos_crop_stays_inside_unit_square() {
        let mut r = rng::stream(0, "clip-test");
        for _ in 0..200 {
            let b = sample_pos_crop(&mut r, (0.3, 1.0), (0.5, 2.0));
            assert!(b.x0 >= 0.0 && b.y0 >= 0.0 && b.x1 <= 1.0 && b.y1 <= 1.0);
            assert!(b.x0 < b.x1 && b.y0 < b.y1);
        }
    }
}
