//! Region classifier head: two hidden layers with layer norm and GELU over
//! flattened RoI features, an L2-normalized projection into the joint
//! image-text space, and a class-agnostic box-delta branch.

use rand_chacha::ChaCha12Rng;

use crate::boxes::NormBox;
use crate::params::param_fields;
use crate::rng;
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::Result;

/// A unit-norm region embedding with its source geometry.
#[derive(Clone, Debug)]
pub struct RegionEmbedding<T> {
    pub embedding: Vec<T>,
    pub source_level: u8,
    pub box_: NormBox,
}

impl<T: Real> RegionEmbedding<T> {
    pub fn new(embedding: Vec<T>, source_level: u8, box_: NormBox) -> Self {
        debug_assert!({
            let n = embedding.iter().map(|&v| v * v).sum::<T>().sqrt().to_f64();
            (n - 1.0).abs() <= 1e-5
        });
        RegionEmbedding { embedding, source_level, box_ }
    }
}

pub struct RcnnParams<P> {
    pub fc1_w: P,
    pub fc1_b: P,
    pub ln1_gain: P,
    pub ln1_bias: P,
    pub fc2_w: P,
    pub fc2_b: P,
    pub ln2_gain: P,
    pub ln2_bias: P,
    pub proj_w: P,
    pub box_w: P,
    pub box_b: P,
}

param_fields!(RcnnParams, fc1_w, fc1_b, ln1_gain, ln1_bias, fc2_w, fc2_b, ln2_gain, ln2_bias, proj_w, box_w, box_b);

impl<T: Real> RcnnParams<Tensor<T>> {
    pub fn init(roi_dim: usize, hidden: usize, joint_dim: usize, rng: &mut ChaCha12Rng) -> Self {
        RcnnParams {
            fc1_w: rng::normal_tensor(rng, vec![roi_dim, hidden], (roi_dim as f64).sqrt().recip()),
            fc1_b: Tensor::zeros(vec![hidden]),
            ln1_gain: Tensor::full(vec![hidden], T::one()),
            ln1_bias: Tensor::zeros(vec![hidden]),
            fc2_w: rng::normal_tensor(rng, vec![hidden, hidden], (hidden as f64).sqrt().recip()),
            fc2_b: Tensor::zeros(vec![hidden]),
            ln2_gain: Tensor::full(vec![hidden], T::one()),
            ln2_bias: Tensor::zeros(vec![hidden]),
            proj_w: rng::normal_tensor(rng, vec![hidden, joint_dim], (hidden as f64).sqrt().recip()),
            box_w: rng::normal_tensor(rng, vec![hidden, 4], 0.001),
            box_b: Tensor::zeros(vec![4]),
        }
    }
}

/// Shared trunk over `[n, roi_dim]` flattened RoI features.
fn trunk<T: Real>(tape: &mut Tape<T>, roi: Var, p: &RcnnParams<Var>) -> Var {
    let eps = T::from_f64(1e-6);
    let h = tape.matmul(roi, p.fc1_w);
    let h = tape.add_row(h, p.fc1_b);
    let h = tape.layer_norm_rows(h, eps);
    let h = tape.mul_row(h, p.ln1_gain);
    let h = tape.add_row(h, p.ln1_bias);
    let h = tape.gelu(h);
    let h = tape.matmul(h, p.fc2_w);
    let h = tape.add_row(h, p.fc2_b);
    let h = tape.layer_norm_rows(h, eps);
    let h = tape.mul_row(h, p.ln2_gain);
    let h = tape.add_row(h, p.ln2_bias);
    tape.gelu(h)
}

/// Unit-norm region embeddings `[n, joint_dim]` from flattened RoI features.
pub fn rcnn_head_embed<T: Real>(tape: &mut Tape<T>, roi: Var, p: &RcnnParams<Var>) -> Result<Var> {
    let h = trunk(tape, roi, p);
    let e = tape.matmul(h, p.proj_w);
    tape.l2_normalize_rows(e)
}

/// Embeddings plus class-agnostic box deltas `[n, 4]`.
pub fn rcnn_head_full<T: Real>(
    tape: &mut Tape<T>,
    roi: Var,
    p: &RcnnParams<Var>,
) -> Result<(Var, Var)> {
    let h = trunk(tape, roi, p);
    let e = tape.matmul(h, p.proj_w);
    let e = tape.l2_normalize_rows(e)?;
    let d = tape.matmul(h, p.box_w);
    let d = tape.add_row(d, p.box_b);
    Ok((e, d))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (RcnnParams<Tensor<f64>>, Tensor<f64>) {
        let mut r = rng::stream(0, "rcnn-test");
        let params = RcnnParams::init(18, 12, 8, &mut r);
        let roi = rng::normal_tensor::<f64>(&mut r, vec![3, 18], 1.0);
        (params, roi)
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let (params, roi_t) = setup();
        let mut tape = Tape::new();
        let pv = params.map(&mut |t| tape.constant(t.clone()));
        let roi = tape.constant(roi_t);
        let e = rcnn_head_embed(&mut tape, roi, &pv).unwrap();
        for i in 0..3 {
            let n: f64 = tape.value(e).row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn identical_inputs_give_identical_embeddings() {
        let (params, roi_t) = setup();
        let run = || {
            let mut tape = Tape::new();
            let pv = params.map(&mut |t| tape.constant(t.clone()));
            let roi = tape.constant(roi_t.clone());
            let e = rcnn_head_embed(&mut tape, roi, &pv).unwrap();
            tape.value(e).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_input_matches_bias_path_oracle() {
        let (mut params, _) = setup();
        // Nonzero biases so the bias path carries signal.
        let mut r = rng::stream(42, "rcnn-bias");
        params.fc1_b = rng::normal_tensor(&mut r, vec![12], 0.5);
        params.fc2_b = rng::normal_tensor(&mut r, vec![12], 0.5);
        params.ln1_bias = rng::normal_tensor(&mut r, vec![12], 0.5);
        params.ln2_bias = rng::normal_tensor(&mut r, vec![12], 0.5);
        let mut tape = Tape::new();
        let pv = params.map(&mut |t| tape.constant(t.clone()));
        let roi = tape.constant(Tensor::zeros(vec![1, 18]));
        let e = rcnn_head_embed(&mut tape, roi, &pv).unwrap();

        // Direct forward with plain arithmetic.
        let hidden = 12;
        let ln = |v: &Vec<f64>| -> Vec<f64> {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - mean) / (var + 1e-6).sqrt()).collect()
        };
        let gelu = |x: f64| 0.5 * x * (1.0 + (0.7978845608028654 * (x + 0.044715 * x * x * x)).tanh());
        // fc1 on zeros = bias
        let mut h: Vec<f64> = params.fc1_b.data().to_vec();
        h = ln(&h)
            .iter()
            .enumerate()
            .map(|(i, v)| v * params.ln1_gain.data()[i] + params.ln1_bias.data()[i])
            .map(gelu)
            .collect();
        let mut h2 = vec![0.0; hidden];
        for (j, o) in h2.iter_mut().enumerate() {
            for (i, &hv) in h.iter().enumerate() {
                *o += hv * params.fc2_w.at(&[i, j]);
            }
            *o += params.fc2_b.data()[j];
        }
        h2 = ln(&h2)
            .iter()
            .enumerate()
            .map(|(i, v)| v * params.ln2_gain.data()[i] + params.ln2_bias.data()[i])
            .map(gelu)
            .collect();
        let mut proj = vec![0.0; 8];
        for (j, o) in proj.iter_mut().enumerate() {
            for (i, &hv) in h2.iter().enumerate() {
                *o += hv * params.proj_w.at(&[i, j]);
            }
        }
        let norm = proj.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (a, e_) in tape.value(e).data().iter().zip(&proj) {
            assert!((a - e_ / norm).abs() <= 1e-9, "{a} vs {}", e_ / norm);
        }
    }
}
