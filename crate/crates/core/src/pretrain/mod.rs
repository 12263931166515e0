//! Two-phase image-text pretraining: global contrastive pretraining of the
//! dual encoders, then detection-oriented pretraining of the detector heads
//! on frozen towers.

pub mod clip;
pub mod contrastive;
pub mod dop;
pub mod optim;
pub mod regions;
pub mod text;

pub use clip::{clip_pretrain_step, ClipBatch, ClipSetup};
pub use contrastive::{info_nce, pool_roi_embeddings, ContrastiveHead, PoolingMode, MIN_TAU};
pub use dop::{dop_loss, dop_pretrain_step, DopHeads, DopSetup};
pub use optim::{AdamW, SgdMomentum};
pub use regions::{sample_regions, RegionSamplerConfig};
pub use text::{encode_text, TextBatch, TextConfig, TextEncoderParams, Vocab};

use crate::tensor::Tensor;
use crate::vit::ViTParams;

/// The dual-encoder VLM trained in phase 1 and frozen afterwards.
pub struct VlmParams<P> {
    pub vit: ViTParams<P>,
    pub text: TextEncoderParams<P>,
    pub head: ContrastiveHead<P>,
}

impl<P> VlmParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> VlmParams<Q> {
        VlmParams { vit: self.vit.map(f), text: self.text.map(f), head: self.head.map(f) }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a P)>) {
        self.vit.visit(&format!("{prefix}.vit"), out);
        self.text.visit(&format!("{prefix}.text"), out);
        self.head.visit(&format!("{prefix}.head"), out);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut P)>) {
        self.vit.visit_mut(&format!("{prefix}.vit"), out);
        self.text.visit_mut(&format!("{prefix}.text"), out);
        self.head.visit_mut(&format!("{prefix}.head"), out);
    }
}

impl<T: crate::tensor::Real> VlmParams<Tensor<T>> {
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("vlm", &mut out);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_mut("vlm", &mut out);
        out
    }
}
