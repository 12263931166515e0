//! Central finite-difference gradient checking. Runs the closure twice per
//! probed coordinate and compares against the reverse-mode gradient.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::{Error, Result};

use super::tape::{Tape, Var};
use super::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct GradReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tolerance: f64,
    /// Coordinates probed per parameter; larger tensors are subsampled.
    pub max_coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: 1e-4, tolerance: 1e-4, max_coords_per_param: 24, seed: 0 }
    }
}

/// Compare the reverse-mode gradient of a scalar-valued function against
/// central differences `(f(p+eps) - f(p-eps)) / (2 eps)` per coordinate.
///
/// `f` receives a fresh tape plus one leaf per parameter and must return a
/// scalar node deterministically.
pub fn finite_diff_check<T: Real>(
    op_name: &str,
    params: &[Tensor<T>],
    opts: &GradCheckOptions,
    f: impl Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
) -> Result<GradReport> {
    let eval = |tensors: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.scalar_value(out).to_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{op_name} produced non-finite value {value}")));
        }
        Ok(value)
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.scalar_value(out).to_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("{op_name} produced non-finite value {value}")));
    }
    let grads = tape.backward(out);
    let analytic: Vec<Tensor<T>> =
        vars.iter().zip(params).map(|(&v, p)| grads.get(v, p)).collect();

    let mut rng = ChaCha12Rng::seed_from_u64(opts.seed);
    let mut max_rel = 0.0f64;
    let mut work: Vec<Tensor<T>> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let n = param.numel();
        let coords: Vec<usize> = if n <= opts.max_coords_per_param {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.max_coords_per_param).into_vec()
        };
        for ci in coords {
            let orig = param.data()[ci];
            work[pi].data_mut()[ci] = orig + T::from_f64(opts.eps);
            let f_plus = eval(&work)?;
            work[pi].data_mut()[ci] = orig - T::from_f64(opts.eps);
            let f_minus = eval(&work)?;
            work[pi].data_mut()[ci] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * opts.eps);
            let a = analytic[pi].data()[ci].to_f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }

    Ok(GradReport {
        op_name: op_name.to_string(),
        max_rel_error: max_rel,
        tolerance: opts.tolerance,
        passed: max_rel <= opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn linear_function_has_exact_gradient() {
        let x = Tensor::<f64>::new(vec![2, 3], vec![0.3, -1.2, 0.7, 2.0, -0.5, 0.1]);
        let report = finite_diff_check("sum", &[x], &GradCheckOptions::default(), |tape, vars| {
            Ok(tape.sum_all(vars[0]))
        })
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.max_rel_error <= 1e-9, "{report:?}");
    }

    #[test]
    fn softmax_dot_passes_at_1e4() {
        let mut r = rng::stream(7, "gradcheck-softmax");
        let x = rng::normal_tensor::<f64>(&mut r, vec![3, 5], 1.0);
        let w = rng::normal_tensor::<f64>(&mut r, vec![3, 5], 1.0);
        let report = finite_diff_check("softmax_dot", &[x], &GradCheckOptions::default(), |tape, vars| {
            let sm = tape.softmax_rows(vars[0]);
            let wv = tape.constant(w.clone());
            let prod = tape.mul(sm, wv);
            Ok(tape.sum_all(prod))
        })
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn report_invariant_passed_iff_within_tolerance() {
        let x = Tensor::<f64>::new(vec![1, 2], vec![0.5, -0.25]);
        let report = finite_diff_check("exp-sum", &[x], &GradCheckOptions::default(), |tape, vars| {
            let e = tape.exp(vars[0]);
            Ok(tape.sum_all(e))
        })
        .unwrap();
        assert_eq!(report.passed, report.max_rel_error <= report.tolerance);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Tensor::<f64>::new(vec![1, 1], vec![1000.0]);
        let err = finite_diff_check("exp-overflow", &[x], &GradCheckOptions::default(), |tape, vars| {
            let e = tape.exp(vars[0]);
            Ok(tape.sum_all(e))
        });
        assert!(err.is_err());
    }
}
