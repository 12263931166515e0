//! Symmetric InfoNCE with a learnable temperature, and the RoI-embedding
//! pooling variants used by detection-oriented pretraining.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::params::param_fields;
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::{Error, Result};

/// Temperature is stored as `log tau`; after each optimizer step it is
/// clamped so `tau >= MIN_TAU`.
pub const MIN_TAU: f64 = 0.005;
pub const INIT_INV_TAU: f64 = 10.0;

pub struct ContrastiveHead<P> {
    pub log_tau: P,
}

param_fields!(ContrastiveHead, log_tau);

impl<T: Real> ContrastiveHead<Tensor<T>> {
    pub fn init() -> Self {
        ContrastiveHead { log_tau: Tensor::scalar(T::from_f64(-(INIT_INV_TAU.ln()))) }
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.data()[0].to_f64().exp()
    }

    pub fn clamp_tau(&mut self) {
        let min_log = T::from_f64(MIN_TAU.ln());
        let v = self.log_tau.data()[0];
        if v < min_log {
            self.log_tau.data_mut()[0] = min_log;
        }
    }
}

/// `(L_I2T + L_T2I) / 2` over temperature-scaled pairwise similarities of
/// matched rows. Rows are assumed unit-norm; `log_tau` is a `[1]` node.
pub fn info_nce<T: Real>(tape: &mut Tape<T>, image: Var, text: Var, log_tau: Var) -> Result<Var> {
    let b = tape.value(image).rows();
    if b == 0 || tape.value(text).rows() != b {
        return Err(Error::Shape(format!(
            "info_nce needs matched batches, got {} vs {}",
            b,
            tape.value(text).rows()
        )));
    }
    let sims = tape.matmul_nt(image, text);
    let neg_log_tau = tape.scale(log_tau, -T::one());
    let inv_tau = tape.exp(neg_log_tau);
    let logits = tape.scale_by(sims, inv_tau);
    if !tape.value(logits).all_finite() {
        return Err(Error::NonFinite("contrastive logits".into()));
    }
    let diag: Vec<usize> = (0..b).collect();
    let i2t = tape.cross_entropy_rows(logits, &diag);
    let logits_t = tape.transpose(logits);
    let t2i = tape.cross_entropy_rows(logits_t, &diag);
    let sum = tape.add(i2t, t2i);
    Ok(tape.scale(sum, T::from_f64(0.5)))
}

/// How per-level RoI embeddings are pooled into image embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    /// Component-wise max per pyramid level (the main configuration).
    MaxPerLevel,
    /// Component-wise mean per pyramid level.
    MeanPerLevel,
    /// One max pool across the RoIs of every level.
    MaxAllLevels,
    /// A single whole-image RoI per level replaces the sampled regions.
    WholeImage,
}

impl FromStr for PoolingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max_per_level" => Ok(PoolingMode::MaxPerLevel),
            "mean_per_level" => Ok(PoolingMode::MeanPerLevel),
            "max_all_levels" => Ok(PoolingMode::MaxAllLevels),
            "whole_image" => Ok(PoolingMode::WholeImage),
            other => Err(Error::Config(format!("unknown pooling mode '{other}'"))),
        }
    }
}

/// Pool groups of unit-norm embeddings (one `[n_i, d]` node per level) into
/// one unit-norm embedding per group. `MaxAllLevels` returns a single group
/// keyed 0.
pub fn pool_roi_embeddings<T: Real>(
    tape: &mut Tape<T>,
    per_level: &[(u8, Var)],
    mode: PoolingMode,
) -> Result<Vec<(u8, Var)>> {
    if per_level.is_empty() {
        return Err(Error::Invalid("no embedding groups to pool".into()));
    }
    for &(level, v) in per_level {
        if tape.value(v).rows() == 0 {
            return Err(Error::Invalid(format!("empty embedding group for level {level}")));
        }
    }
    let pool_one = |tape: &mut Tape<T>, v: Var, mode: PoolingMode| -> Result<Var> {
        let pooled = match mode {
            PoolingMode::MeanPerLevel => tape.mean_rows(v),
            _ => tape.max_rows(v),
        };
        tape.l2_normalize_rows(pooled)
    };
    match mode {
        PoolingMode::MaxAllLevels => {
            let parts: Vec<Var> = per_level.iter().map(|&(_, v)| v).collect();
            let all = tape.concat_rows(&parts);
            Ok(vec![(0, pool_one(tape, all, mode)?)])
        }
        _ => per_level
            .iter()
            .map(|&(level, v)| Ok((level, pool_one(tape, v, mode)?)))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn unit_rows(seed: u64, n: usize, d: usize) -> Tensor<f64> {
        let mut r = rng::stream(seed, "nce-test");
        let mut t = rng::normal_tensor::<f64>(&mut r, vec![n, d], 1.0);
        for i in 0..n {
            let norm: f64 = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            for j in 0..d {
                let v = t.at(&[i, j]) / norm;
                t.set(&[i, j], v);
            }
        }
        t
    }

    #[test]
    fn single_pair_loss_is_exactly_zero() {
        let mut tape = Tape::new();
        let img = tape.constant(unit_rows(0, 1, 6));
        let txt = tape.constant(unit_rows(1, 1, 6));
        let lt = tape.constant(Tensor::scalar(0.0f64));
        let loss = info_nce(&mut tape, img, txt, lt).unwrap();
        assert_eq!(tape.scalar_value(loss), 0.0);
    }

    #[test]
    fn orthogonal_two_pair_case_matches_closed_form() {
        // v_i . l_i = 1, v_i . l_j = 0 (i != j), tau = 1:
        // loss = log(1 + e^{-1}).
        let mut tape = Tape::new();
        let img = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let txt = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let lt = tape.constant(Tensor::scalar(0.0f64));
        let loss = info_nce(&mut tape, img, txt, lt).unwrap();
        let expected = (1.0f64 + (-1.0f64).exp()).ln();
        assert!((tape.scalar_value(loss) - expected).abs() < 1e-12);
    }

    #[test]
    fn single_roi_pooling_is_identity() {
        let mut tape = Tape::new();
        let e = tape.constant(unit_rows(2, 1, 5));
        let pooled = pool_roi_embeddings(&mut tape, &[(2, e)], PoolingMode::MaxPerLevel).unwrap();
        let want = tape.value(e).clone();
        for (a, b) in tape.value(pooled[0].1).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn max_of_basis_vectors_is_normalized_sum() {
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let pooled = pool_roi_embeddings(&mut tape, &[(3, e)], PoolingMode::MaxPerLevel).unwrap();
        let inv = 0.5f64.sqrt();
        let got = tape.value(pooled[0].1).data().to_vec();
        assert!((got[0] - inv).abs() < 1e-12 && (got[1] - inv).abs() < 1e-12);
    }

    #[test]
    fn mean_of_identical_embeddings_is_identity() {
        let row = unit_rows(3, 1, 4);
        let mut stacked = Vec::new();
        for _ in 0..5 {
            stacked.extend_from_slice(row.data());
        }
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::new(vec![5, 4], stacked));
        let pooled = pool_roi_embeddings(&mut tape, &[(4, e)], PoolingMode::MeanPerLevel).unwrap();
        for (a, b) in tape.value(pooled[0].1).data().iter().zip(row.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn tau_clamp_enforces_floor() {
        let mut head = ContrastiveHead::<Tensor<f64>>::init();
        assert!((head.tau() - 0.1).abs() < 1e-12);
        head.log_tau = Tensor::scalar(-100.0);
        head.clamp_tau();
        assert!((head.tau() - MIN_TAU).abs() < 1e-12);
    }
}
