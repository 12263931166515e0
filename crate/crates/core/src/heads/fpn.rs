//! Simple feature pyramid over a single ViT token grid: strided upsampling
//! for levels 2 and 3, identity for level 4, downsampling for level 5, each
//! followed by 1x1 and 3x3 convolutions with layer normalization.

use std::collections::BTreeMap;

use rand_chacha::ChaCha12Rng;

use crate::rng;
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::{Error, Result};

use super::conv::{channel_layer_norm, conv1x1, conv3x3, deconv2x2, DeconvParams};

pub const LEVELS: [u8; 4] = [2, 3, 4, 5];

/// Ordered map from pyramid level index to its `[side, side, c]` grid node.
/// Level 4 has the token-grid resolution; each level halves the previous.
pub struct FeaturePyramid {
    levels: BTreeMap<u8, Var>,
}

impl FeaturePyramid {
    pub fn new(levels: BTreeMap<u8, Var>) -> Self {
        assert_eq!(levels.keys().copied().collect::<Vec<_>>(), LEVELS.to_vec());
        FeaturePyramid { levels }
    }

    pub fn get(&self, level: u8) -> Var {
        self.levels[&level]
    }

    pub fn iter(&self) -> impl Iterator<Item = (u8, Var)> + '_ {
        self.levels.iter().map(|(&l, &v)| (l, v))
    }
}

pub struct ConvBlock<P> {
    pub w1: P,
    pub b1: P,
    pub ln1_gain: P,
    pub ln1_bias: P,
    pub w3: P,
    pub b3: P,
    pub ln2_gain: P,
    pub ln2_bias: P,
}

crate::params::param_fields!(ConvBlock, w1, b1, ln1_gain, ln1_bias, w3, b3, ln2_gain, ln2_bias);

impl<T: Real> ConvBlock<Tensor<T>> {
    fn init(c_in: usize, c_out: usize, rng: &mut ChaCha12Rng) -> Self {
        ConvBlock {
            w1: rng::normal_tensor(rng, vec![c_in, c_out], (c_in as f64).sqrt().recip()),
            b1: Tensor::zeros(vec![c_out]),
            ln1_gain: Tensor::full(vec![c_out], T::one()),
            ln1_bias: Tensor::zeros(vec![c_out]),
            w3: rng::normal_tensor(rng, vec![9 * c_out, c_out], (9.0 * c_out as f64).sqrt().recip()),
            b3: Tensor::zeros(vec![c_out]),
            ln2_gain: Tensor::full(vec![c_out], T::one()),
            ln2_bias: Tensor::zeros(vec![c_out]),
        }
    }
}

fn conv_block<T: Real>(tape: &mut Tape<T>, x: Var, p: &ConvBlock<Var>) -> Var {
    let y = conv1x1(tape, x, p.w1, p.b1);
    let y = channel_layer_norm(tape, y, p.ln1_gain, p.ln1_bias);
    let y = conv3x3(tape, y, p.w3, p.b3);
    channel_layer_norm(tape, y, p.ln2_gain, p.ln2_bias)
}

pub struct FpnParams<P> {
    /// Level 2: two stacked deconvs with a norm + GELU in between.
    pub up2_a: DeconvParams<P>,
    pub up2_ln_gain: P,
    pub up2_ln_bias: P,
    pub up2_b: DeconvParams<P>,
    /// Level 3: one deconv.
    pub up3: DeconvParams<P>,
    pub out2: ConvBlock<P>,
    pub out3: ConvBlock<P>,
    pub out4: ConvBlock<P>,
    pub out5: ConvBlock<P>,
}

impl<P> FpnParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> FpnParams<Q> {
        FpnParams {
            up2_a: self.up2_a.map(f),
            up2_ln_gain: f(&self.up2_ln_gain),
            up2_ln_bias: f(&self.up2_ln_bias),
            up2_b: self.up2_b.map(f),
            up3: self.up3.map(f),
            out2: self.out2.map(f),
            out3: self.out3.map(f),
            out4: self.out4.map(f),
            out5: self.out5.map(f),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a P)>) {
        self.up2_a.visit(&format!("{prefix}.up2_a"), out);
        out.push((format!("{prefix}.up2_ln_gain"), &self.up2_ln_gain));
        out.push((format!("{prefix}.up2_ln_bias"), &self.up2_ln_bias));
        self.up2_b.visit(&format!("{prefix}.up2_b"), out);
        self.up3.visit(&format!("{prefix}.up3"), out);
        self.out2.visit(&format!("{prefix}.out2"), out);
        self.out3.visit(&format!("{prefix}.out3"), out);
        self.out4.visit(&format!("{prefix}.out4"), out);
        self.out5.visit(&format!("{prefix}.out5"), out);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut P)>) {
        self.up2_a.visit_mut(&format!("{prefix}.up2_a"), out);
        out.push((format!("{prefix}.up2_ln_gain"), &mut self.up2_ln_gain));
        out.push((format!("{prefix}.up2_ln_bias"), &mut self.up2_ln_bias));
        self.up2_b.visit_mut(&format!("{prefix}.up2_b"), out);
        self.up3.visit_mut(&format!("{prefix}.up3"), out);
        self.out2.visit_mut(&format!("{prefix}.out2"), out);
        self.out3.visit_mut(&format!("{prefix}.out3"), out);
        self.out4.visit_mut(&format!("{prefix}.out4"), out);
        self.out5.visit_mut(&format!("{prefix}.out5"), out);
    }
}

impl<T: Real> FpnParams<Tensor<T>> {
    pub fn init(embed_dim: usize, fpn_channels: usize, rng: &mut ChaCha12Rng) -> Self {
        let d = embed_dim;
        let half = d / 2;
        let quarter = d / 4;
        let deconv = |c_in: usize, c_out: usize, rng: &mut ChaCha12Rng| DeconvParams {
            w: rng::normal_tensor(rng, vec![c_in, 4 * c_out], (c_in as f64).sqrt().recip()),
            b: Tensor::zeros(vec![c_out]),
        };
        FpnParams {
            up2_a: deconv(d, half, rng),
            up2_ln_gain: Tensor::full(vec![half], T::one()),
            up2_ln_bias: Tensor::zeros(vec![half]),
            up2_b: deconv(half, quarter, rng),
            up3: deconv(d, half, rng),
            out2: ConvBlock::init(quarter, fpn_channels, rng),
            out3: ConvBlock::init(half, fpn_channels, rng),
            out4: ConvBlock::init(d, fpn_channels, rng),
            out5: ConvBlock::init(d, fpn_channels, rng),
        }
    }
}

/// Build the four-level pyramid from an `[s, s, d]` token grid.
pub fn build_fpn<T: Real>(
    tape: &mut Tape<T>,
    tokens: Var,
    params: &FpnParams<Var>,
) -> Result<FeaturePyramid> {
    let s = tape.value(tokens).shape().to_vec();
    let side = s[0];
    if side < 8 || side % 2 != 0 {
        return Err(Error::Shape(format!(
            "token grid side {side} too small for pyramid levels 2..5 (need even side >= 8)"
        )));
    }
    if s[2] % 4 != 0 {
        return Err(Error::Shape(format!("embed dim {} must be divisible by 4", s[2])));
    }

    let up_a = deconv2x2(tape, tokens, &params.up2_a);
    let up_a = channel_layer_norm(tape, up_a, params.up2_ln_gain, params.up2_ln_bias);
    let up_a = tape.gelu(up_a);
    let lvl2_src = deconv2x2(tape, up_a, &params.up2_b);
    let lvl3_src = deconv2x2(tape, tokens, &params.up3);
    let lvl5_src = tape.maxpool2x2(tokens);

    let mut levels = BTreeMap::new();
    levels.insert(2, conv_block(tape, lvl2_src, &params.out2));
    levels.insert(3, conv_block(tape, lvl3_src, &params.out3));
    levels.insert(4, conv_block(tape, tokens, &params.out4));
    levels.insert(5, conv_block(tape, lvl5_src, &params.out5));
    Ok(FeaturePyramid::new(levels))
}
