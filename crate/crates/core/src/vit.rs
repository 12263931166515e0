//! Plain vision transformer backbone: patchify with (optionally cropped)
//! positional embeddings, pre-norm transformer blocks with grid window
//! attention, L evenly spaced global-attention layers, and global-average
//! pooling into the joint image-text embedding space.

use rand_chacha::ChaCha12Rng;

use crate::boxes::NormBox;
use crate::params::param_fields;
use crate::rng;
use crate::tensor::{FeatureGrid, Real, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViTConfig {
    /// Square input image side in pixels.
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Window grid K: windows per side. `1` means global attention everywhere.
    pub grid: usize,
    /// Number L of evenly spaced global-attention layers.
    pub global_layers: usize,
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.grid == 0 || self.depth == 0 || self.heads == 0 {
            return Err(Error::Config("vit dims must be positive".into()));
        }
        if self.image_size % (self.patch_size * self.grid) != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch*grid = {}",
                self.image_size,
                self.patch_size * self.grid
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads {} must divide embed dim {}",
                self.heads, self.embed_dim
            )));
        }
        if self.global_layers > self.depth {
            return Err(Error::Config(format!(
                "global layers {} exceed depth {}",
                self.global_layers, self.depth
            )));
        }
        Ok(())
    }

    pub fn token_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Window attention cell size M in tokens.
    pub fn window_cell(&self) -> usize {
        self.token_side() / self.grid
    }

    /// Global layers at indices `ceil(depth*(i+1)/L) - 1`.
    pub fn global_indices(&self) -> Vec<usize> {
        (0..self.global_layers)
            .map(|i| (self.depth * (i + 1)).div_ceil(self.global_layers) - 1)
            .collect()
    }

    pub fn with_image_size(mut self, image_size: usize) -> Self {
        self.image_size = image_size;
        self
    }

    pub fn with_grid(mut self, grid: usize) -> Self {
        self.grid = grid;
        self
    }
}

/// Positional embedding table at full (detection) token resolution. Smaller
/// token grids sample it by bilinear resize; crops sample a sub-region.
#[derive(Clone, Debug)]
pub struct PosEmbed<T> {
    table: Tensor<T>,
}

impl<T: Real> PosEmbed<T> {
    pub fn new(table: Tensor<T>) -> Result<Self> {
        let s = table.shape();
        if s.len() != 3 || s[0] != s[1] {
            return Err(Error::Shape(format!("positional table must be [side, side, dim], got {s:?}")));
        }
        if !table.all_finite() {
            return Err(Error::NonFinite("positional table".into()));
        }
        Ok(PosEmbed { table })
    }

    pub fn full_grid_side(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn table(&self) -> &Tensor<T> {
        &self.table
    }

    pub fn into_table(self) -> Tensor<T> {
        self.table
    }
}

pub struct AttnParams<P> {
    pub wq: P,
    pub bq: P,
    pub wk: P,
    pub bk: P,
    pub wv: P,
    pub bv: P,
    pub wo: P,
    pub bo: P,
}

param_fields!(AttnParams, wq, bq, wk, bk, wv, bv, wo, bo);

pub struct BlockParams<P> {
    pub ln1_gain: P,
    pub ln1_bias: P,
    pub attn: AttnParams<P>,
    pub ln2_gain: P,
    pub ln2_bias: P,
    pub mlp_w1: P,
    pub mlp_b1: P,
    pub mlp_w2: P,
    pub mlp_b2: P,
}

impl<P> BlockParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> BlockParams<Q> {
        BlockParams {
            ln1_gain: f(&self.ln1_gain),
            ln1_bias: f(&self.ln1_bias),
            attn: self.attn.map(f),
            ln2_gain: f(&self.ln2_gain),
            ln2_bias: f(&self.ln2_bias),
            mlp_w1: f(&self.mlp_w1),
            mlp_b1: f(&self.mlp_b1),
            mlp_w2: f(&self.mlp_w2),
            mlp_b2: f(&self.mlp_b2),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a P)>) {
        out.push((format!("{prefix}.ln1_gain"), &self.ln1_gain));
        out.push((format!("{prefix}.ln1_bias"), &self.ln1_bias));
        self.attn.visit(&format!("{prefix}.attn"), out);
        out.push((format!("{prefix}.ln2_gain"), &self.ln2_gain));
        out.push((format!("{prefix}.ln2_bias"), &self.ln2_bias));
        out.push((format!("{prefix}.mlp_w1"), &self.mlp_w1));
        out.push((format!("{prefix}.mlp_b1"), &self.mlp_b1));
        out.push((format!("{prefix}.mlp_w2"), &self.mlp_w2));
        out.push((format!("{prefix}.mlp_b2"), &self.mlp_b2));
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut P)>) {
        out.push((format!("{prefix}.ln1_gain"), &mut self.ln1_gain));
        out.push((format!("{prefix}.ln1_bias"), &mut self.ln1_bias));
        self.attn.visit_mut(&format!("{prefix}.attn"), out);
        out.push((format!("{prefix}.ln2_gain"), &mut self.ln2_gain));
        out.push((format!("{prefix}.ln2_bias"), &mut self.ln2_bias));
        out.push((format!("{prefix}.mlp_w1"), &mut self.mlp_w1));
        out.push((format!("{prefix}.mlp_b1"), &mut self.mlp_b1));
        out.push((format!("{prefix}.mlp_w2"), &mut self.mlp_w2));
        out.push((format!("{prefix}.mlp_b2"), &mut self.mlp_b2));
    }
}

pub struct ViTParams<P> {
    pub patch_w: P,
    pub patch_b: P,
    pub pos_table: P,
    pub blocks: Vec<BlockParams<P>>,
    pub final_ln_gain: P,
    pub final_ln_bias: P,
    /// Projection from token space into the joint image-text space.
    pub img_proj: P,
}

impl<P> ViTParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> ViTParams<Q> {
        ViTParams {
            patch_w: f(&self.patch_w),
            patch_b: f(&self.patch_b),
            pos_table: f(&self.pos_table),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            final_ln_gain: f(&self.final_ln_gain),
            final_ln_bias: f(&self.final_ln_bias),
            img_proj: f(&self.img_proj),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a P)>) {
        out.push((format!("{prefix}.patch_w"), &self.patch_w));
        out.push((format!("{prefix}.patch_b"), &self.patch_b));
        out.push((format!("{prefix}.pos_table"), &self.pos_table));
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.block{i:02}"), out);
        }
        out.push((format!("{prefix}.final_ln_gain"), &self.final_ln_gain));
        out.push((format!("{prefix}.final_ln_bias"), &self.final_ln_bias));
        out.push((format!("{prefix}.img_proj"), &self.img_proj));
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut P)>) {
        out.push((format!("{prefix}.patch_w"), &mut self.patch_w));
        out.push((format!("{prefix}.patch_b"), &mut self.patch_b));
        out.push((format!("{prefix}.pos_table"), &mut self.pos_table));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.block{i:02}"), out);
        }
        out.push((format!("{prefix}.final_ln_gain"), &mut self.final_ln_gain));
        out.push((format!("{prefix}.final_ln_bias"), &mut self.final_ln_bias));
        out.push((format!("{prefix}.img_proj"), &mut self.img_proj));
    }
}

pub const MLP_RATIO: usize = 4;
const LN_EPS: f64 = 1e-6;

impl<T: Real> ViTParams<Tensor<T>> {
    /// Fresh parameters. The positional table always spans the detection
    /// token grid of `cfg`; `joint_dim` sizes the contrastive projection.
    pub fn init(cfg: &ViTConfig, joint_dim: usize, rng: &mut ChaCha12Rng) -> Self {
        let d = cfg.embed_dim;
        let side = cfg.token_side();
        let patch_in = cfg.patch_size * cfg.patch_size * 3;
        let hidden = MLP_RATIO * d;
        let blocks = (0..cfg.depth)
            .map(|_| BlockParams {
                ln1_gain: Tensor::full(vec![d], T::one()),
                ln1_bias: Tensor::zeros(vec![d]),
                attn: AttnParams {
                    wq: rng::normal_tensor(rng, vec![d, d], 0.02),
                    bq: Tensor::zeros(vec![d]),
                    wk: rng::normal_tensor(rng, vec![d, d], 0.02),
                    bk: Tensor::zeros(vec![d]),
                    wv: rng::normal_tensor(rng, vec![d, d], 0.02),
                    bv: Tensor::zeros(vec![d]),
                    wo: rng::normal_tensor(rng, vec![d, d], 0.02),
                    bo: Tensor::zeros(vec![d]),
                },
                ln2_gain: Tensor::full(vec![d], T::one()),
                ln2_bias: Tensor::zeros(vec![d]),
                mlp_w1: rng::normal_tensor(rng, vec![d, hidden], 0.02),
                mlp_b1: Tensor::zeros(vec![hidden]),
                mlp_w2: rng::normal_tensor(rng, vec![hidden, d], 0.02),
                mlp_b2: Tensor::zeros(vec![d]),
            })
            .collect();
        ViTParams {
            patch_w: rng::normal_tensor(rng, vec![patch_in, d], (patch_in as f64).sqrt().recip()),
            patch_b: Tensor::zeros(vec![d]),
            pos_table: rng::normal_tensor(rng, vec![side, side, d], 0.02),
            blocks,
            final_ln_gain: Tensor::full(vec![d], T::one()),
            final_ln_bias: Tensor::zeros(vec![d]),
            img_proj: rng::normal_tensor(rng, vec![d, joint_dim], (d as f64).sqrt().recip()),
        }
    }
}

/// Patchify an image into a token grid and add positional embeddings — the
/// full table resized to the token grid, or the `crop` region of the table
/// when one is given.
pub fn patchify<T: Real>(
    tape: &mut Tape<T>,
    image: &FeatureGrid<T>,
    params: &ViTParams<Var>,
    cfg: &ViTConfig,
    crop: Option<NormBox>,
) -> Result<Var> {
    if image.height() != cfg.image_size || image.width() != cfg.image_size {
        return Err(Error::Shape(format!(
            "image is {}x{}, config expects {0}x{0} = {}",
            image.height(),
            image.width(),
            cfg.image_size
        )));
    }
    if image.channels() != 3 {
        return Err(Error::Shape(format!("expected RGB image, got {} channels", image.channels())));
    }
    if cfg.image_size % cfg.patch_size != 0 {
        return Err(Error::Shape(format!(
            "image size {} not divisible by patch size {}",
            cfg.image_size, cfg.patch_size
        )));
    }
    let side = cfg.token_side();
    let p = cfg.patch_size;
    let w = image.width();

    let img = tape.constant(image.to_tensor());
    // One row per token: the raster-ordered pixels of its patch.
    let mut idx = Vec::with_capacity(side * side * p * p * 3);
    for ty in 0..side {
        for tx in 0..side {
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..3 {
                        idx.push((((ty * p + py) * w + tx * p + px) * 3 + ch) as isize);
                    }
                }
            }
        }
    }
    let patches = tape.gather_flat(img, &idx, vec![side * side, p * p * 3]);
    let tok = tape.matmul(patches, params.patch_w);
    let tok = tape.add_row(tok, params.patch_b);

    let region = crop.map_or((0.0, 0.0, 1.0, 1.0), |b| b.as_tuple());
    let pos = tape.resize_region(params.pos_table, region, side, side)?;
    let pos = tape.reshape(pos, vec![side * side, cfg.embed_dim]);
    let tokens = tape.add(tok, pos);
    Ok(tape.reshape(tokens, vec![side, side, cfg.embed_dim]))
}

/// Multi-head self-attention over one flattened token group.
fn attention<T: Real>(tape: &mut Tape<T>, x: Var, p: &AttnParams<Var>, heads: usize) -> Var {
    let d = tape.value(x).cols();
    let dh = d / heads;
    let scale = T::from_f64((dh as f64).sqrt().recip());
    let q = tape.matmul(x, p.wq);
    let q = tape.add_row(q, p.bq);
    let k = tape.matmul(x, p.wk);
    let k = tape.add_row(k, p.bk);
    let v = tape.matmul(x, p.wv);
    let v = tape.add_row(v, p.bv);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let logits = tape.matmul_nt(qh, kh);
        let logits = tape.scale(logits, scale);
        let attn = tape.softmax_rows(logits);
        outs.push(tape.matmul(attn, vh));
    }
    let cat = tape.concat_cols(&outs);
    let o = tape.matmul(cat, p.wo);
    tape.add_row(o, p.bo)
}

/// Row-index groups for a K x K window partition of a `side`-sided grid.
fn window_groups(side: usize, grid: usize) -> Vec<Vec<usize>> {
    let m = side / grid;
    let mut groups = Vec::with_capacity(grid * grid);
    for wy in 0..grid {
        for wx in 0..grid {
            let mut rows = Vec::with_capacity(m * m);
            for iy in 0..m {
                for ix in 0..m {
                    rows.push((wy * m + iy) * side + wx * m + ix);
                }
            }
            groups.push(rows);
        }
    }
    groups
}

/// Pre-norm transformer block over `[n, c]` tokens with global attention
/// (used by the text encoder, which has no spatial structure).
pub(crate) fn encoder_block<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    block: &BlockParams<Var>,
    heads: usize,
) -> Var {
    let n = tape.value(x).rows();
    transformer_block(tape, x, block, heads, &[(0..n).collect()])
}

/// Pre-norm transformer block over `[n, c]` tokens with attention restricted
/// to the given row groups (one group = global attention).
fn transformer_block<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    block: &BlockParams<Var>,
    heads: usize,
    groups: &[Vec<usize>],
) -> Var {
    let ln1 = tape.layer_norm_rows(x, T::from_f64(LN_EPS));
    let ln1 = tape.mul_row(ln1, block.ln1_gain);
    let ln1 = tape.add_row(ln1, block.ln1_bias);

    let attn_out = if groups.len() == 1 {
        attention(tape, ln1, &block.attn, heads)
    } else {
        let per_window: Vec<Var> = groups
            .iter()
            .map(|rows| {
                let xg = tape.gather_rows(ln1, rows);
                attention(tape, xg, &block.attn, heads)
            })
            .collect();
        let stacked = tape.concat_rows(&per_window);
        // Map window-ordered rows back to row-major token order.
        let n: usize = groups.iter().map(Vec::len).sum();
        let mut inverse = vec![0usize; n];
        let mut pos = 0;
        for rows in groups {
            for &r in rows {
                inverse[r] = pos;
                pos += 1;
            }
        }
        tape.gather_rows(stacked, &inverse)
    };
    let x = tape.add(x, attn_out);

    let ln2 = tape.layer_norm_rows(x, T::from_f64(LN_EPS));
    let ln2 = tape.mul_row(ln2, block.ln2_gain);
    let ln2 = tape.add_row(ln2, block.ln2_bias);
    let h = tape.matmul(ln2, block.mlp_w1);
    let h = tape.add_row(h, block.mlp_b1);
    let h = tape.gelu(h);
    let h = tape.matmul(h, block.mlp_w2);
    let h = tape.add_row(h, block.mlp_b2);
    tape.add(x, h)
}

/// One window-attention transformer block over an `[s, s, c]` token grid.
pub fn window_attend<T: Real>(
    tape: &mut Tape<T>,
    tokens: Var,
    block: &BlockParams<Var>,
    heads: usize,
    grid: usize,
) -> Result<Var> {
    let shape = tape.value(tokens).shape().to_vec();
    let (side, c) = (shape[0], shape[2]);
    if side % grid != 0 {
        return Err(Error::Shape(format!("token side {side} not divisible by window grid {grid}")));
    }
    let flat = tape.reshape(tokens, vec![side * side, c]);
    let groups = window_groups(side, grid);
    let out = transformer_block(tape, flat, block, heads, &groups);
    Ok(tape.reshape(out, vec![side, side, c]))
}

/// Full backbone: `depth` blocks (window attention except at the L evenly
/// spaced global layers), then the final layer norm.
pub fn vit_forward<T: Real>(
    tape: &mut Tape<T>,
    tokens: Var,
    params: &ViTParams<Var>,
    cfg: &ViTConfig,
) -> Result<Var> {
    let shape = tape.value(tokens).shape().to_vec();
    let (side, c) = (shape[0], shape[2]);
    if side % cfg.grid != 0 {
        return Err(Error::Shape(format!(
            "token side {side} not divisible by window grid {}",
            cfg.grid
        )));
    }
    let global: Vec<usize> = cfg.global_indices();
    let window = window_groups(side, cfg.grid);
    let whole = window_groups(side, 1);

    let mut x = tape.reshape(tokens, vec![side * side, c]);
    for (i, block) in params.blocks.iter().enumerate() {
        let groups = if global.contains(&i) { &whole } else { &window };
        x = transformer_block(tape, x, block, cfg.heads, groups);
    }
    let ln = tape.layer_norm_rows(x, T::from_f64(LN_EPS));
    let ln = tape.mul_row(ln, params.final_ln_gain);
    let ln = tape.add_row(ln, params.final_ln_bias);
    Ok(tape.reshape(ln, vec![side, side, c]))
}

/// Global-average-pool the token grid, project into the joint space and
/// L2-normalize. Errors if the pooled vector cannot be normalized.
pub fn pool_image_embedding<T: Real>(
    tape: &mut Tape<T>,
    tokens: Var,
    img_proj: Var,
) -> Result<Var> {
    let shape = tape.value(tokens).shape().to_vec();
    let flat = tape.reshape(tokens, vec![shape[0] * shape[1], shape[2]]);
    let mean = tape.mean_rows(flat);
    let proj = tape.matmul(mean, img_proj);
    tape.l2_normalize_rows(proj)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_cfg() -> ViTConfig {
        ViTConfig {
            image_size: 32,
            patch_size: 8,
            embed_dim: 16,
            depth: 2,
            heads: 2,
            grid: 2,
            global_layers: 1,
        }
    }

    fn bind<T: Real>(tape: &mut Tape<T>, p: &ViTParams<Tensor<T>>) -> ViTParams<Var> {
        p.map(&mut |t| tape.constant(t.clone()))
    }

    fn rand_image(seed: u64, size: usize) -> FeatureGrid<f64> {
        let mut r = rng::stream(seed, "vit-test-image");
        let vals = (0..size * size * 3).map(|_| rng::gaussian(&mut r) * 0.3).collect();
        FeatureGrid::new(size, size, 3, vals).unwrap()
    }

    #[test]
    fn patchify_produces_token_grid() {
        let cfg = ViTConfig { image_size: 32, patch_size: 16, ..toy_cfg() };
        let mut r = rng::stream(0, "vit-init");
        let params = ViTParams::<Tensor<f64>>::init(&cfg, 8, &mut r);
        let mut tape = Tape::new();
        let pv = bind(&mut tape, &params);
        let img = rand_image(1, 32);
        let tokens = patchify(&mut tape, &img, &pv, &cfg, None).unwrap();
        assert_eq!(tape.value(tokens).shape(), &[2, 2, 16]);
    }

    #[test]
    fn patchify_rejects_wrong_image_size() {
        let cfg = toy_cfg();
        let mut r = rng::stream(0, "vit-init");
        let params = ViTParams::<Tensor<f64>>::init(&cfg, 8, &mut r);
        let mut tape = Tape::new();
        let pv = bind(&mut tape, &params);
        let img = rand_image(1, 16);
        assert!(patchify(&mut tape, &img, &pv, &cfg, None).is_err());
    }

    #[test]
    fn whole_image_crop_matches_no_crop() {
        let cfg = toy_cfg();
        let mut r = rng::stream(3, "vit-init");
        let params = ViTParams::<Tensor<f64>>::init(&cfg, 8, &mut r);
        let mut tape = Tape::new();
        let pv = bind(&mut tape, &params);
        let img = rand_image(2, 32);
        let a = patchify(&mut tape, &img, &pv, &cfg, None).unwrap();
        let b = patchify(&mut tape, &img, &pv, &cfg, Some(NormBox::whole_image())).unwrap();
        let (av, bv) = (tape.value(a).data(), tape.value(b).data());
        for (x, y) in av.iter().zip(bv) {
            assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn cropped_pos_embedding_matches_direct_bilinear_resize() {
        // Crop the central quarter of the table; compare the added embedding
        // against an independently coded bilinear resize.
        let cfg = toy_cfg();
        let side = cfg.token_side();
        let mut r = rng::stream(4, "vit-init");
        let params = ViTParams::<Tensor<f64>>::init(&cfg, 8, &mut r);
        let img = FeatureGrid::new(32, 32, 3, vec![0.0; 32 * 32 * 3]).unwrap();
        let crop = NormBox::new(0.25, 0.25, 0.75, 0.75).unwrap();

        let mut tape = Tape::new();
        let pv = bind(&mut tape, &params);
        let with_crop = patchify(&mut tape, &img, &pv, &cfg, Some(crop)).unwrap();
        let without_pe = {
            // Zero table isolates the patch-projection part.
            let mut zeroed = params.map(&mut |t| t.clone());
            zeroed.pos_table = Tensor::zeros(params.pos_table.shape().to_vec());
            let zv = bind(&mut tape, &zeroed);
            patchify(&mut tape, &img, &zv, &cfg, Some(crop)).unwrap()
        };
        let added: Vec<f64> = tape
            .value(with_crop)
            .data()
            .iter()
            .zip(tape.value(without_pe).data())
            .map(|(a, b)| a - b)
            .collect();

        // Independent oracle: direct bilinear interpolation of the table.
        let table = &params.pos_table;
        let s = table.shape()[0];
        let d = table.shape()[2];
        let mut expected = vec![0.0f64; side * side * d];
        for i in 0..side {
            let v = 0.25 + (i as f64 + 0.5) / side as f64 * 0.5;
            let cy = (v * s as f64 - 0.5).clamp(0.0, (s - 1) as f64);
            for j in 0..side {
                let u = 0.25 + (j as f64 + 0.5) / side as f64 * 0.5;
                let cx = (u * s as f64 - 0.5).clamp(0.0, (s - 1) as f64);
                let (y0, x0) = (cy.floor() as usize, cx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(s - 1), (x0 + 1).min(s - 1));
                let (fy, fx) = (cy - y0 as f64, cx - x0 as f64);
                for ch in 0..d {
                    let g = |yy: usize, xx: usize| table.at(&[yy, xx, ch]);
                    expected[(i * side + j) * d + ch] = g(y0, x0) * (1.0 - fy) * (1.0 - fx)
                        + g(y0, x1) * (1.0 - fy) * fx
                        + g(y1, x0) * fy * (1.0 - fx)
                        + g(y1, x1) * fy * fx;
                }
            }
        }
        for (a, e) in added.iter().zip(&expected) {
            assert!((a - e).abs() <= 1e-6, "{a} vs {e}");
        }
    }

    #[test]
    fn cross_window_perturbation_does_not_leak() {
        let cfg = toy_cfg();
        let mut r = rng::stream(5, "vit-init");
        let params = ViTParams::<Tensor<f64>>::init(&cfg, 8, &mut r);
        let mut grid_vals = rng::normal_tensor::<f64>(&mut r, vec![4, 4, 16], 1.0);

        let run = |vals: &Tensor<f64>, params: &ViTParams<Tensor<f64>>| {
            let mut tape = Tape::new();
            let pv = bind(&mut tape, params);
            let tokens = tape.constant(vals.clone());
            let out = window_attend(&mut tape, tokens, &pv.blocks[0], cfg.heads, 2).unwrap();
            tape.value(out).clone()
        };
        let before = run(&grid_vals, &params);
        // Perturb token (3,3): bottom-right window. Token (0,0) lives in the
        // top-left window and must be unaffected by the whole block.
        for ch in 0..16 {
            let v = grid_vals.at(&[3, 3, ch]);
            grid_vals.set(&[3, 3, ch], v + 10.0);
        }
        let after = run(&grid_vals, &params);
        for ch in 0..16 {
            assert_eq!(before.at(&[0, 0, ch]), after.at(&[0, 0, ch]));
        }
        // Sanity: the perturbed window did change.
        assert!((0..16).any(|ch| before.at(&[3, 3, ch]) != after.at(&[3, 3, ch])));
    }

    #[test]
    fn rolling_by_cell_size_rolls_block_output() {
        let cfg = toy_cfg();
        let side = cfg.token_side(); // 4, grid 2 -> cell size 2
        let m = (side / cfg.grid) as i64;
        let mut r = rng::stream(6, "vit-init");
        let params = ViTParams::<Tensor<f64>>::init(&cfg, 8, &mut r);
        let vals = rng::normal_tensor::<f64>(&mut r, vec![side, side, 16], 1.0);

        let mut tape = Tape::new();
        let pv = bind(&mut tape, &params);
        let tokens = tape.constant(vals.clone());
        let out = window_attend(&mut tape, tokens, &pv.blocks[0], cfg.heads, cfg.grid).unwrap();
        let rolled_out = tape.roll2d(out, m, m);

        let rolled_in = tape.roll2d(tokens, m, m);
        let out_of_rolled = window_attend(&mut tape, rolled_in, &pv.blocks[0], cfg.heads, cfg.grid).unwrap();

        for (a, b) in tape.value(rolled_out).data().iter().zip(tape.value(out_of_rolled).data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn all_global_depth_ignores_grid_setting() {
        let cfg = ViTConfig { depth: 4, global_layers: 4, ..toy_cfg() };
        let mut r = rng::stream(7, "vit-init");
        let params = ViTParams::<Tensor<f64>>::init(&cfg, 8, &mut r);
        let vals = rng::normal_tensor::<f64>(&mut r, vec![4, 4, 16], 1.0);
        let run = |grid: usize| {
            let cfg = cfg.with_grid(grid);
            let mut tape = Tape::new();
            let pv = bind(&mut tape, &params);
            let tokens = tape.constant(vals.clone());
            let out = vit_forward(&mut tape, tokens, &pv, &cfg).unwrap();
            tape.value(out).clone()
        };
        let (a, b) = (run(1), run(2));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn global_layer_spacing_follows_documented_rule() {
        let cfg = ViTConfig { depth: 8, global_layers: 4, ..toy_cfg() };
        assert_eq!(cfg.global_indices(), vec![1, 3, 5, 7]);
        let cfg = ViTConfig { depth: 4, global_layers: 4, ..toy_cfg() };
        assert_eq!(cfg.global_indices(), vec![0, 1, 2, 3]);
        let cfg = ViTConfig { depth: 4, global_layers: 1, ..toy_cfg() };
        assert_eq!(cfg.global_indices(), vec![3]);
        let cfg = ViTConfig { depth: 12, global_layers: 4, ..toy_cfg() };
        assert_eq!(cfg.global_indices(), vec![2, 5, 8, 11]);
    }

    #[test]
    fn zero_output_projections_make_blocks_identity() {
        let cfg = toy_cfg();
        let mut r = rng::stream(8, "vit-init");
        let mut params = ViTParams::<Tensor<f64>>::init(&cfg, 8, &mut r);
        for b in &mut params.blocks {
            b.attn.wo = Tensor::zeros(vec![16, 16]);
            b.mlp_w2 = Tensor::zeros(vec![MLP_RATIO * 16, 16]);
        }
        let vals = rng::normal_tensor::<f64>(&mut r, vec![4, 4, 16], 1.0);

        let mut tape = Tape::new();
        let pv = bind(&mut tape, &params);
        let tokens = tape.constant(vals.clone());
        let out = vit_forward(&mut tape, tokens, &pv, &cfg).unwrap();

        // Blocks contribute nothing, so the output is just the final norm of
        // the input tokens.
        let flat = tape.reshape(tokens, vec![16, 16]);
        let ln = tape.layer_norm_rows(flat, 1e-6);
        let ln = tape.mul_row(ln, pv.final_ln_gain);
        let ln = tape.add_row(ln, pv.final_ln_bias);
        for (a, b) in tape.value(out).data().iter().zip(tape.value(ln).data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn pooled_embedding_is_unit_norm_and_permutation_invariant() {
        let cfg = toy_cfg();
        let mut r = rng::stream(9, "vit-init");
        let params = ViTParams::<Tensor<f64>>::init(&cfg, 8, &mut r);
        let vals = rng::normal_tensor::<f64>(&mut r, vec![4, 4, 16], 1.0);

        let mut tape = Tape::new();
        let pv = bind(&mut tape, &params);
        let tokens = tape.constant(vals.clone());
        let emb = pool_image_embedding(&mut tape, tokens, pv.img_proj).unwrap();
        let norm: f64 = tape.value(emb).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);

        // Reverse all token positions; the mean is unchanged.
        let flat = vals.clone().reshape(vec![16, 16]);
        let reversed: Vec<Vec<f64>> = (0..16).rev().map(|i| flat.row(i).to_vec()).collect();
        let rev = Tensor::from_rows(&reversed).reshape(vec![4, 4, 16]);
        let tokens2 = tape.constant(rev);
        let emb2 = pool_image_embedding(&mut tape, tokens2, pv.img_proj).unwrap();
        for (a, b) in tape.value(emb).data().iter().zip(tape.value(emb2).data()) {
            assert!((a - b).abs() <= 1e-7);
        }
    }

    #[test]
    fn pooled_embedding_matches_direct_oracle() {
        let cfg = toy_cfg();
        let mut r = rng::stream(10, "vit-init");
        let params = ViTParams::<Tensor<f64>>::init(&cfg, 8, &mut r);
        let vals = rng::normal_tensor::<f64>(&mut r, vec![4, 4, 16], 1.0);

        let mut tape = Tape::new();
        let pv = bind(&mut tape, &params);
        let tokens = tape.constant(vals.clone());
        let emb = pool_image_embedding(&mut tape, tokens, pv.img_proj).unwrap();

        // Hand-computed mean + project + normalize.
        let mut mean = vec![0.0f64; 16];
        for i in 0..16 {
            for ch in 0..16 {
                mean[ch] += vals.data()[i * 16 + ch] / 16.0;
            }
        }
        let mut proj = vec![0.0f64; 8];
        for (j, p) in proj.iter_mut().enumerate() {
            for (ch, m) in mean.iter().enumerate() {
                *p += m * params.img_proj.at(&[ch, j]);
            }
        }
        let norm = proj.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (a, e) in tape.value(emb).data().iter().zip(&proj) {
            assert!((a - e / norm).abs() <= 1e-9);
        }
    }

    #[test]
    fn constant_token_grid_pools_to_projected_constant() {
        let cfg = toy_cfg();
        let mut r = rng::stream(11, "vit-init");
        let params = ViTParams::<Tensor<f64>>::init(&cfg, 8, &mut r);
        let vals = Tensor::full(vec![4, 4, 16], 0.5f64);
        let mut tape = Tape::new();
        let pv = bind(&mut tape, &params);
        let tokens = tape.constant(vals);
        let emb = pool_image_embedding(&mut tape, tokens, pv.img_proj).unwrap();
        let mut proj = vec![0.0f64; 8];
        for (j, p) in proj.iter_mut().enumerate() {
            for ch in 0..16 {
                *p += 0.5 * params.img_proj.at(&[ch, j]);
            }
        }
        let norm = proj.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (a, e) in tape.value(emb).data().iter().zip(&proj) {
            assert!((a - e / norm).abs() <= 1e-9);
        }
    }
}
