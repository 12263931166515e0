//! Whitespace tokenizer over a fixed vocabulary and a small transformer
//! text encoder with masked mean pooling.

use std::collections::BTreeMap;

use rand_chacha::ChaCha12Rng;

use crate::rng;
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::vit::{encoder_block, BlockParams, ViTConfig, ViTParams};
use crate::{Error, Result};

/// Id 0 is reserved for padding and never produced by `encode`.
pub const PAD_ID: u32 = 0;

#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Vocab {
    /// Build from a word list; entries are deduplicated and sorted so the
    /// mapping depends only on the set.
    pub fn new(words: impl IntoIterator<Item = String>) -> Self {
        let mut sorted: Vec<String> = words.into_iter().collect();
        sorted.sort();
        sorted.dedup();
        let mut index = BTreeMap::new();
        for (i, w) in sorted.iter().enumerate() {
            index.insert(w.clone(), (i + 1) as u32);
        }
        Vocab { words: sorted, index }
    }

    /// Vocabulary size including the padding id.
    pub fn len(&self) -> usize {
        self.words.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = Vec::new();
        for w in text.split_whitespace() {
            let norm = w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
            if norm.is_empty() {
                continue;
            }
            let id = self
                .index
                .get(&norm)
                .ok_or_else(|| Error::Invalid(format!("out-of-vocabulary token '{norm}'")))?;
            ids.push(*id);
        }
        if ids.is_empty() {
            return Err(Error::Invalid(format!("empty token sequence for '{text}'")));
        }
        Ok(ids)
    }
}

/// Padded id matrix plus a validity mask.
#[derive(Clone, Debug)]
pub struct TextBatch {
    ids: Vec<u32>,
    mask: Vec<bool>,
    batch: usize,
    max_len: usize,
}

impl TextBatch {
    pub fn new(sequences: Vec<Vec<u32>>, max_len: usize) -> Result<Self> {
        let batch = sequences.len();
        let mut ids = vec![PAD_ID; batch * max_len];
        let mut mask = vec![false; batch * max_len];
        for (i, seq) in sequences.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::Invalid(format!("sequence {i} is empty")));
            }
            if seq.len() > max_len {
                return Err(Error::Invalid(format!(
                    "sequence {i} has {} tokens, max is {max_len}",
                    seq.len()
                )));
            }
            for (j, &id) in seq.iter().enumerate() {
                if id == PAD_ID {
                    return Err(Error::Invalid("padding id inside a sequence".into()));
                }
                ids[i * max_len + j] = id;
                mask[i * max_len + j] = true;
            }
        }
        Ok(TextBatch { ids, mask, batch, max_len })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// The unpadded token ids of row `i`.
    pub fn sequence(&self, i: usize) -> Vec<u32> {
        (0..self.max_len)
            .filter(|&j| self.mask[i * self.max_len + j])
            .map(|j| self.ids[i * self.max_len + j])
            .collect()
    }
}

pub struct TextEncoderParams<P> {
    pub embed: P,
    pub pos: P,
    pub blocks: Vec<BlockParams<P>>,
    pub final_ln_gain: P,
    pub final_ln_bias: P,
    pub proj: P,
}

impl<P> TextEncoderParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> TextEncoderParams<Q> {
        TextEncoderParams {
            embed: f(&self.embed),
            pos: f(&self.pos),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            final_ln_gain: f(&self.final_ln_gain),
            final_ln_bias: f(&self.final_ln_bias),
            proj: f(&self.proj),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a P)>) {
        out.push((format!("{prefix}.embed"), &self.embed));
        out.push((format!("{prefix}.pos"), &self.pos));
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.block{i:02}"), out);
        }
        out.push((format!("{prefix}.final_ln_gain"), &self.final_ln_gain));
        out.push((format!("{prefix}.final_ln_bias"), &self.final_ln_bias));
        out.push((format!("{prefix}.proj"), &self.proj));
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut P)>) {
        out.push((format!("{prefix}.embed"), &mut self.embed));
        out.push((format!("{prefix}.pos"), &mut self.pos));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.block{i:02}"), out);
        }
        out.push((format!("{prefix}.final_ln_gain"), &mut self.final_ln_gain));
        out.push((format!("{prefix}.final_ln_bias"), &mut self.final_ln_bias));
        out.push((format!("{prefix}.proj"), &mut self.proj));
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub max_len: usize,
}

impl<T: Real> TextEncoderParams<Tensor<T>> {
    pub fn init(cfg: &TextConfig, joint_dim: usize, rng: &mut ChaCha12Rng) -> Self {
        // Reuse the ViT block initializer by spoofing a config with the text
        // dims; only embed_dim/depth/heads matter for block shapes.
        let vit_cfg = ViTConfig {
            image_size: 16,
            patch_size: 16,
            embed_dim: cfg.dim,
            depth: cfg.depth,
            heads: cfg.heads,
            grid: 1,
            global_layers: cfg.depth,
        };
        let donor = ViTParams::<Tensor<T>>::init(&vit_cfg, joint_dim, rng);
        TextEncoderParams {
            embed: rng::normal_tensor(rng, vec![cfg.vocab_size, cfg.dim], 0.02),
            pos: rng::normal_tensor(rng, vec![cfg.max_len, cfg.dim], 0.02),
            blocks: donor.blocks,
            final_ln_gain: Tensor::full(vec![cfg.dim], T::one()),
            final_ln_bias: Tensor::zeros(vec![cfg.dim]),
            proj: rng::normal_tensor(rng, vec![cfg.dim, joint_dim], (cfg.dim as f64).sqrt().recip()),
        }
    }
}

/// Encode a batch into unit-norm joint-space embeddings `[B, joint]`.
///
/// Each sequence is processed at its true length, so padding can never leak
/// into attention or pooling.
pub fn encode_text<T: Real>(
    tape: &mut Tape<T>,
    batch: &TextBatch,
    params: &TextEncoderParams<Var>,
    cfg: &TextConfig,
) -> Result<Var> {
    if batch.batch() == 0 {
        return Err(Error::Invalid("empty text batch".into()));
    }
    let vocab_rows = tape.value(params.embed).rows();
    let mut pooled = Vec::with_capacity(batch.batch());
    for i in 0..batch.batch() {
        let seq = batch.sequence(i);
        let rows: Vec<usize> = seq
            .iter()
            .map(|&id| {
                let r = id as usize;
                if r == 0 || r >= vocab_rows {
                    return Err(Error::Invalid(format!("token id {id} outside vocabulary")));
                }
                Ok(r)
            })
            .collect::<Result<_>>()?;
        let tok = tape.gather_rows(params.embed, &rows);
        let pos = tape.gather_rows(params.pos, &(0..rows.len()).collect::<Vec<_>>());
        let mut x = tape.add(tok, pos);
        for block in &params.blocks {
            x = encoder_block(tape, x, block, cfg.heads);
        }
        let ln = tape.layer_norm_rows(x, T::from_f64(1e-6));
        let ln = tape.mul_row(ln, params.final_ln_gain);
        let ln = tape.add_row(ln, params.final_ln_bias);
        pooled.push(tape.mean_rows(ln));
    }
    let stacked = tape.concat_rows(&pooled);
    let proj = tape.matmul(stacked, params.proj);
    tape.l2_normalize_rows(proj)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (Vocab, TextConfig, TextEncoderParams<Tensor<f64>>) {
        let vocab = Vocab::new(["a", "red", "circle", "blue", "square", "photo", "of"].map(String::from));
        let cfg = TextConfig { vocab_size: vocab.len(), dim: 16, depth: 2, heads: 2, max_len: 8 };
        let mut r = rng::stream(0, "text-test");
        let params = TextEncoderParams::init(&cfg, 8, &mut r);
        (vocab, cfg, params)
    }

    #[test]
    fn oov_and_empty_are_rejected() {
        let (vocab, _, _) = toy();
        assert!(vocab.encode("a purple circle").is_err());
        assert!(vocab.encode("   ").is_err());
    }

    #[test]
    fn padding_does_not_change_embeddings() {
        let (vocab, cfg, params) = toy();
        let ids = vocab.encode("a red circle").unwrap();
        let short = TextBatch::new(vec![ids.clone()], 4).unwrap();
        let long = TextBatch::new(vec![ids], 8).unwrap();
        let mut tape = Tape::new();
        let pv = params.map(&mut |t| tape.constant(t.clone()));
        let cfg_short = TextConfig { max_len: 4, ..cfg };
        let a = encode_text(&mut tape, &short, &pv, &cfg_short).unwrap();
        let b = encode_text(&mut tape, &long, &pv, &cfg).unwrap();
        for (x, y) in tape.value(a).data().iter().zip(tape.value(b).data()) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let (vocab, cfg, params) = toy();
        let batch = TextBatch::new(
            vec![vocab.encode("a red circle").unwrap(), vocab.encode("a blue square").unwrap()],
            8,
        )
        .unwrap();
        let mut tape = Tape::new();
        let pv = params.map(&mut |t| tape.constant(t.clone()));
        let e = encode_text(&mut tape, &batch, &pv, &cfg).unwrap();
        for i in 0..2 {
            let n: f64 = tape.value(e).row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= 1e-5);
        }
    }
}
