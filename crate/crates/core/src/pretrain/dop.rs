//! Phase 2: detection-oriented pretraining. The dual encoders stay frozen;
//! the feature pyramid, the region classifier head and a fresh temperature
//! learn from per-level contrastive losses over randomly sampled regions.

use std::collections::BTreeMap;

use crate::boxes::NormBox;
use crate::heads::fpn::{build_fpn, FpnParams, LEVELS};
use crate::heads::rcnn::{rcnn_head_embed, RcnnParams};
use crate::heads::roi::roi_align_batch;
use crate::rng::derive_seed;
use crate::tensor::{FeatureGrid, Real, Tape, Tensor, Var};
use crate::vit::{patchify, vit_forward, ViTConfig};
use crate::{Error, Result};

use super::clip::sample_pos_crop;
use super::contrastive::{info_nce, pool_roi_embeddings, ContrastiveHead, PoolingMode};
use super::optim::AdamW;
use super::regions::{sample_regions, RegionSamplerConfig};
use super::text::{encode_text, TextBatch};
use super::{ClipSetup, VlmParams};

/// Everything phase 2 trains.
pub struct DopHeads<P> {
    pub fpn: FpnParams<P>,
    pub rcnn: RcnnParams<P>,
    pub head: ContrastiveHead<P>,
}

impl<P> DopHeads<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> DopHeads<Q> {
        DopHeads { fpn: self.fpn.map(f), rcnn: self.rcnn.map(f), head: self.head.map(f) }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a P)>) {
        self.fpn.visit(&format!("{prefix}.fpn"), out);
        self.rcnn.visit(&format!("{prefix}.rcnn"), out);
        self.head.visit(&format!("{prefix}.head"), out);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut P)>) {
        self.fpn.visit_mut(&format!("{prefix}.fpn"), out);
        self.rcnn.visit_mut(&format!("{prefix}.rcnn"), out);
        self.head.visit_mut(&format!("{prefix}.head"), out);
    }
}

impl<T: Real> DopHeads<Tensor<T>> {
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_mut("dop", &mut out);
        out
    }
}

#[derive(Clone, Debug)]
pub struct DopSetup {
    /// Backbone view for this phase (phase-2 resolution, global attention).
    pub vit_cfg: ViTConfig,
    pub roi_out: usize,
    pub samples_per_bin: usize,
    pub pooling: PoolingMode,
    pub n_per_level: BTreeMap<u8, usize>,
    pub scale_range: (f64, f64),
    pub aspect_range: (f64, f64),
    /// Positional-embedding crop ranges (shared with phase 1).
    pub crop_scale: (f64, f64),
    pub crop_aspect: (f64, f64),
}

/// Frozen-tower pass: tokens for one image, computed without gradients.
pub fn frozen_tokens<T: Real>(
    vlm: &VlmParams<Tensor<T>>,
    image: &FeatureGrid<T>,
    cfg: &ViTConfig,
    crop: Option<NormBox>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = vlm.vit.map(&mut |t| tape.constant(t.clone()));
    let tokens = patchify(&mut tape, image, &bound, cfg, crop)?;
    let out = vit_forward(&mut tape, tokens, &bound, cfg)?;
    Ok(tape.value(out).clone())
}

/// Frozen text-tower pass over a batch.
pub fn frozen_text_embeddings<T: Real>(
    vlm: &VlmParams<Tensor<T>>,
    texts: &TextBatch,
    setup: &ClipSetup,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = vlm.text.map(&mut |t| tape.constant(t.clone()));
    let e = encode_text(&mut tape, texts, &bound, &setup.text_cfg)?;
    Ok(tape.value(e).clone())
}

/// The multi-level contrastive loss over precomputed frozen tokens and text
/// embeddings. Gradients reach only the heads bound in `heads`.
pub fn dop_loss<T: Real>(
    tape: &mut Tape<T>,
    token_batch: &[Tensor<T>],
    text_embeddings: &Tensor<T>,
    heads: &DopHeads<Var>,
    setup: &DopSetup,
    step_seed: u64,
) -> Result<Var> {
    let batch = token_batch.len();
    if batch == 0 || text_embeddings.rows() != batch {
        return Err(Error::Invalid(format!(
            "dop batch mismatch: {} token grids vs {} text rows",
            batch,
            text_embeddings.rows()
        )));
    }
    let text = tape.constant(text_embeddings.clone());

    // pooled[group] -> per-image [1, joint] nodes.
    let mut pooled_per_group: BTreeMap<u8, Vec<Var>> = BTreeMap::new();
    for (i, tokens) in token_batch.iter().enumerate() {
        let tokens = tape.constant(tokens.clone());
        let pyramid = build_fpn(tape, tokens, &heads.fpn)?;
        let sampler = RegionSamplerConfig {
            n_per_level: setup.n_per_level.clone(),
            scale_range: setup.scale_range,
            aspect_range: setup.aspect_range,
            seed: derive_seed(step_seed, &format!("dop-image{i}")),
        };
        let mut per_level: Vec<(u8, Var)> = Vec::with_capacity(LEVELS.len());
        for level in LEVELS {
            let boxes = if setup.pooling == PoolingMode::WholeImage {
                vec![NormBox::whole_image()]
            } else {
                sample_regions(&sampler, level)?
            };
            if boxes.is_empty() {
                continue;
            }
            let feats = roi_align_batch(tape, pyramid.get(level), &boxes, setup.roi_out, setup.samples_per_bin)?;
            let emb = rcnn_head_embed(tape, feats, &heads.rcnn)?;
            per_level.push((level, emb));
        }
        for (group, pooled) in pool_roi_embeddings(tape, &per_level, setup.pooling)? {
            pooled_per_group.entry(group).or_default().push(pooled);
        }
    }

    // One contrastive loss per group (per level, or the single all-level
    // group), equally weighted and summed.
    let mut total: Option<Var> = None;
    for rows in pooled_per_group.values() {
        let img = tape.concat_rows(rows);
        let level_loss = info_nce(tape, img, text, heads.head.log_tau)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, level_loss),
            None => level_loss,
        });
    }
    total.ok_or_else(|| Error::Invalid("no pyramid level produced embeddings".into()))
}

pub struct DopBatch<T> {
    pub images: Vec<FeatureGrid<T>>,
    pub texts: TextBatch,
}

/// One AdamW step on the detector heads; the towers never enter the tape as
/// leaves, so their bytes cannot change.
pub fn dop_pretrain_step<T: Real>(
    vlm: &VlmParams<Tensor<T>>,
    heads: &mut DopHeads<Tensor<T>>,
    opt: &mut AdamW<T>,
    batch: &DopBatch<T>,
    clip_setup: &ClipSetup,
    setup: &DopSetup,
    step_seed: u64,
) -> Result<f64> {
    let mut crop_rng = crate::rng::stream(step_seed, "dop-pos-crop");
    let tokens: Vec<Tensor<T>> = batch
        .images
        .iter()
        .map(|img| {
            let crop = sample_pos_crop(&mut crop_rng, setup.crop_scale, setup.crop_aspect);
            frozen_tokens(vlm, img, &setup.vit_cfg, Some(crop))
        })
        .collect::<Result<_>>()?;
    let text = frozen_text_embeddings(vlm, &batch.texts, clip_setup)?;

    let mut tape = Tape::new();
    let mut names: Vec<(String, Var)> = Vec::new();
    let bound = {
        let mut pairs = Vec::new();
        heads.visit("dop", &mut pairs);
        let mut iter = pairs.into_iter();
        heads.map(&mut |t: &Tensor<T>| {
            let (name, _) = iter.next().expect("visit and map walk the same fields");
            let var = tape.leaf(t.clone());
            names.push((name, var));
            var
        })
    };
    let loss = dop_loss(&mut tape, &tokens, &text, &bound, setup, step_seed)?;
    let loss_val = tape.scalar_value(loss).to_f64();
    if !loss_val.is_finite() {
        return Err(Error::Diverged(format!("dop loss became {loss_val} at step {}", opt.step_count())));
    }
    let grads = tape.backward(loss);
    let mut grad_map = BTreeMap::new();
    for (name, var) in &names {
        if let Some(g) = grads.try_get(*var) {
            grad_map.insert(name.clone(), g.clone());
        }
    }
    let mut params = heads.named_mut();
    opt.step(&mut params, &grad_map);
    heads.head.clamp_tau();
    Ok(loss_val)
}
