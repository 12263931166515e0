//! Shifted-window learning: run the backbone on the token grid and on a
//! cyclically rolled copy, unshift the second result, and average. Both
//! branches share the same weights; the combinator adds none.

use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tape, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwlConfig {
    /// Shift as a fraction of the window cell size: `s = round(q * M)`.
    pub q: f64,
    /// Apply SWL in the finetuned detector backbone.
    pub finetuned: bool,
    /// Apply SWL in the frozen backbone used for VLM scores.
    pub frozen: bool,
}

impl Default for SwlConfig {
    fn default() -> Self {
        SwlConfig { q: 0.5, finetuned: true, frozen: true }
    }
}

impl SwlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::Config(format!("swl.q must be in (0, 1], got {}", self.q)));
        }
        Ok(())
    }

    pub fn disabled() -> Self {
        SwlConfig { q: 0.5, finetuned: false, frozen: false }
    }
}

/// Window cell size `M = image / (patch * grid)` and shift `s = round(q M)`
/// clamped to `[1, M]`.
pub fn compute_shift_size(
    image_size: usize,
    patch_size: usize,
    grid: usize,
    q: f64,
) -> Result<(usize, usize)> {
    if patch_size == 0 || grid == 0 || image_size % (patch_size * grid) != 0 {
        return Err(Error::Config(format!(
            "image size {image_size} not divisible by patch {patch_size} * grid {grid}"
        )));
    }
    let m = image_size / (patch_size * grid);
    let s = ((q * m as f64).round() as usize).clamp(1, m);
    Ok((m, s))
}

/// `(backbone(x) + unroll(backbone(roll(x, s, s)), s)) / 2`.
///
/// The backbone closure runs twice with identical weights; both branches are
/// differentiable and the roll adjoint is the exact inverse permutation.
pub fn swl_forward<T: Real>(
    tape: &mut Tape<T>,
    tokens: Var,
    shift: usize,
    mut backbone: impl FnMut(&mut Tape<T>, Var) -> Result<Var>,
) -> Result<Var> {
    let s = shift as i64;
    let plain = backbone(tape, tokens)?;
    let rolled = tape.roll2d(tokens, s, s);
    let shifted = backbone(tape, rolled)?;
    let unshifted = tape.roll2d(shifted, -s, -s);
    let sum = tape.add(plain, unshifted);
    Ok(tape.scale(sum, T::from_f64(0.5)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::Tensor;

    #[test]
    fn shift_size_matches_reference_values() {
        assert_eq!(compute_shift_size(1024, 16, 4, 0.5).unwrap(), (16, 8));
        assert_eq!(compute_shift_size(64, 8, 2, 0.5).unwrap(), (4, 2));
    }

    #[test]
    fn full_fraction_shift_equals_cell_size() {
        let (m, s) = compute_shift_size(1024, 16, 4, 1.0).unwrap();
        assert_eq!(s, m);
    }

    #[test]
    fn indivisible_geometry_is_rejected() {
        assert!(compute_shift_size(100, 16, 4, 0.5).is_err());
    }

    #[test]
    fn identity_backbone_returns_tokens_exactly() {
        let mut r = rng::stream(0, "swl-test");
        let vals = rng::normal_tensor::<f64>(&mut r, vec![4, 4, 3], 1.0);
        let mut tape = Tape::new();
        let tokens = tape.constant(vals.clone());
        let out = swl_forward(&mut tape, tokens, 2, |_, v| Ok(v)).unwrap();
        assert_eq!(tape.value(out).data(), vals.data());
    }

    #[test]
    fn output_lies_between_branch_values() {
        let mut r = rng::stream(1, "swl-test");
        let vals = rng::normal_tensor::<f64>(&mut r, vec![4, 4, 2], 1.0);
        // A backbone that is not roll-equivariant: add a fixed position bias.
        let bias = rng::normal_tensor::<f64>(&mut r, vec![4, 4, 2], 1.0);
        let mut tape = Tape::new();
        let tokens = tape.constant(vals.clone());
        let bias_var = tape.constant(bias.clone());
        let mut branches: Vec<Tensor<f64>> = Vec::new();
        let out = {
            let branches = &mut branches;
            let mut backbone = move |tape: &mut Tape<f64>, v: Var| {
                let o = tape.add(v, bias_var);
                branches.push(tape.value(o).clone());
                Ok(o)
            };
            swl_forward(&mut tape, tokens, 1, &mut backbone).unwrap()
        };
        // Second branch output must be unshifted before comparing.
        let b0 = branches[0].clone();
        let mut t2 = Tape::new();
        let v = t2.constant(branches[1].clone());
        let unshifted = t2.roll2d(v, -1, -1);
        let b1 = t2.value(unshifted).clone();
        for ((o, x), y) in tape.value(out).data().iter().zip(b0.data()).zip(b1.data()) {
            let (lo, hi) = (x.min(*y), x.max(*y));
            assert!(*o >= lo - 1e-12 && *o <= hi + 1e-12);
        }
    }

    #[test]
    fn gradient_flows_through_both_branches() {
        let mut r = rng::stream(2, "swl-test");
        let vals = rng::normal_tensor::<f64>(&mut r, vec![2, 2, 1], 1.0);
        let weight = rng::normal_tensor::<f64>(&mut r, vec![1, 1], 1.0);
        let mut tape = Tape::new();
        let tokens = tape.constant(vals);
        let w = tape.leaf(weight.clone());
        let out = swl_forward(&mut tape, tokens, 1, |tape, v| {
            let flat = tape.reshape(v, vec![4, 1]);
            let prod = tape.matmul(flat, w);
            Ok(tape.reshape(prod, vec![2, 2, 1]))
        })
        .unwrap();
        let loss = tape.sum_all(out);
        let grads = tape.backward(loss);
        assert!(grads.try_get(w).is_some());
    }
}
