//! Detection scores, frozen-backbone VLM scores, and their geometric-mean
//! ensemble.

use crate::boxes::NormBox;
use crate::heads::roi::roi_align;
use crate::tensor::{Real, Tape, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnsembleParams {
    /// Base-category exponent on the detection score.
    pub alpha: f64,
    /// Novel-category exponent on the detection score.
    pub beta: f64,
}

impl EnsembleParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!(
                "ensemble weights must lie in [0, 1], got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// A final detection with its score decomposition.
#[derive(Clone, Debug)]
pub struct ScoredDetection {
    pub box_: NormBox,
    pub label: String,
    /// Detection-path probability.
    pub p: f64,
    /// VLM-path probability.
    pub z: f64,
    /// Ensembled score.
    pub s_ens: f64,
}

/// Cosine logits of region embeddings against `[background; categories]`,
/// divided by `temp`. Row layout: background at column 0.
pub fn detection_logits<T: Real>(
    tape: &mut Tape<T>,
    regions: Var,
    background: Var,
    categories: Var,
    temp: f64,
) -> Result<Var> {
    let bg = tape.l2_normalize_rows(background)?;
    let table = tape.concat_rows(&[bg, categories]);
    let sims = tape.matmul_nt(regions, table);
    Ok(tape.scale(sims, T::from_f64(temp.recip())))
}

/// Softmax detection scores over `[background; categories]`.
pub fn detection_score<T: Real>(
    tape: &mut Tape<T>,
    regions: Var,
    background: Var,
    categories: Var,
    temp: f64,
) -> Result<Var> {
    let logits = detection_logits(tape, regions, background, categories, temp)?;
    Ok(tape.softmax_rows(logits))
}

/// VLM score of one box: RoI-Align on the backbone token grid, average-pool,
/// project through the pretraining projection, cosine against the category
/// embeddings (no background), softmax with `temp`. Returns `[1, k]`.
pub fn vlm_score<T: Real>(
    tape: &mut Tape<T>,
    frozen_tokens: Var,
    img_proj: Var,
    box_: &NormBox,
    categories: Var,
    temp: f64,
    roi_out: usize,
    samples_per_bin: usize,
) -> Result<Var> {
    let roi = roi_align(tape, frozen_tokens, box_, roi_out, samples_per_bin)?;
    let s = tape.value(roi).shape().to_vec();
    let flat = tape.reshape(roi, vec![s[0] * s[1], s[2]]);
    let mean = tape.mean_rows(flat);
    let proj = tape.matmul(mean, img_proj);
    let unit = tape.l2_normalize_rows(proj)?;
    let sims = tape.matmul_nt(unit, categories);
    let logits = tape.scale(sims, T::from_f64(temp.recip()));
    Ok(tape.softmax_rows(logits))
}

/// Geometric-mean ensemble. `p` has the background at index 0 and covers
/// `k` categories; `z` covers the same `k` categories without background.
/// Base categories use `z^(1-alpha) p^alpha`, novel ones `z^(1-beta) p^beta`,
/// and the background score is the detection score alone.
pub fn ensemble_score(
    p: &[f64],
    z: &[f64],
    params: &EnsembleParams,
    novel: &[bool],
) -> Result<Vec<f64>> {
    if p.len() != z.len() + 1 || z.len() != novel.len() {
        return Err(Error::Invalid(format!(
            "ensemble shape mismatch: p={} z={} novel={}",
            p.len(),
            z.len(),
            novel.len()
        )));
    }
    if p.iter().any(|&v| v < 0.0) || z.iter().any(|&v| v < 0.0) {
        return Err(Error::Invalid("ensemble scores must be non-negative".into()));
    }
    params.validate()?;
    let mut out = Vec::with_capacity(p.len());
    out.push(p[0]);
    for i in 0..z.len() {
        let exp_p = if novel[i] { params.beta } else { params.alpha };
        out.push(z[i].powf(1.0 - exp_p) * p[i + 1].powf(exp_p));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::Tensor;

    #[test]
    fn alpha_beta_one_reduces_to_detection_score() {
        let p = [0.1, 0.5, 0.4];
        let z = [0.9, 0.2];
        let s = ensemble_score(&p, &z, &EnsembleParams { alpha: 1.0, beta: 1.0 }, &[false, true]).unwrap();
        assert_eq!(s, vec![0.1, 0.5, 0.4]);
    }

    #[test]
    fn equal_scores_are_fixed_points() {
        let p = [0.2, 0.3, 0.5];
        let z = [0.3, 0.5];
        for (a, b) in [(0.0, 0.0), (0.3, 0.7), (1.0, 0.5)] {
            let s = ensemble_score(&p, &z, &EnsembleParams { alpha: a, beta: b }, &[false, true]).unwrap();
            for (got, want) in s.iter().zip(&p) {
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn closed_form_novel_case() {
        // z = 0.64, p = 0.25, beta = 0.5: s = 0.8 * 0.5 = 0.4.
        let s = ensemble_score(&[0.0, 0.25], &[0.64], &EnsembleParams { alpha: 0.2, beta: 0.5 }, &[true])
            .unwrap();
        assert!((s[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn negative_inputs_are_rejected() {
        assert!(ensemble_score(&[0.1, -0.2], &[0.3], &EnsembleParams { alpha: 0.5, beta: 0.5 }, &[false])
            .is_err());
    }

    #[test]
    fn detection_score_sums_to_one_and_matches_oracle() {
        let mut r = rng::stream(0, "scoring-test");
        let mut regions = rng::normal_tensor::<f64>(&mut r, vec![2, 6], 1.0);
        for i in 0..2 {
            let n: f64 = regions.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            for j in 0..6 {
                let v = regions.at(&[i, j]) / n;
                regions.set(&[i, j], v);
            }
        }
        let mut cats = rng::normal_tensor::<f64>(&mut r, vec![3, 6], 1.0);
        for i in 0..3 {
            let n: f64 = cats.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            for j in 0..6 {
                let v = cats.at(&[i, j]) / n;
                cats.set(&[i, j], v);
            }
        }
        let bg = rng::normal_tensor::<f64>(&mut r, vec![1, 6], 1.0);
        let temp = 0.07;

        let mut tape = Tape::new();
        let rv = tape.constant(regions.clone());
        let bv = tape.constant(bg.clone());
        let cv = tape.constant(cats.clone());
        let score = detection_score(&mut tape, rv, bv, cv, temp).unwrap();
        let got = tape.value(score).clone();
        assert_eq!(got.shape(), &[2, 4]);
        for i in 0..2 {
            let sum: f64 = got.row(i).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-6);
        }

        // Naive cosine + softmax oracle.
        let bg_norm: f64 = bg.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        for i in 0..2 {
            let mut logits = vec![0.0f64; 4];
            logits[0] = regions.row(i).iter().zip(bg.data()).map(|(a, b)| a * b / bg_norm).sum::<f64>() / temp;
            for c in 0..3 {
                logits[c + 1] =
                    regions.row(i).iter().zip(cats.row(c)).map(|(a, b)| a * b).sum::<f64>() / temp;
            }
            let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for (c, &e) in exps.iter().enumerate() {
                assert!((got.at(&[i, c]) - e / sum).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn matching_region_dominates_at_low_temperature() {
        let cats = Tensor::new(vec![2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let region = Tensor::new(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]);
        let bg = Tensor::new(vec![1, 4], vec![0.0, 0.0, 0.0, 1.0]);
        let mut tape = Tape::new();
        let rv = tape.constant(region);
        let bv = tape.constant(bg);
        let cv = tape.constant(cats);
        let score = detection_score(&mut tape, rv, bv, cv, 0.01).unwrap();
        let got = tape.value(score);
        assert!(got.at(&[0, 1]) > 0.999);
    }

    #[test]
    fn constant_feature_map_gives_uniform_vlm_score() {
        let mut r = rng::stream(1, "scoring-test");
        let tokens = Tensor::full(vec![4, 4, 6], 0.3f64);
        let proj = rng::normal_tensor::<f64>(&mut r, vec![6, 5], 1.0);
        // All-identical category rows: logits equal, softmax uniform.
        let one_cat = rng::normal_tensor::<f64>(&mut r, vec![1, 5], 1.0);
        let mut cats = Tensor::zeros(vec![3, 5]);
        for i in 0..3 {
            for j in 0..5 {
                cats.set(&[i, j], one_cat.at(&[0, j]));
            }
        }
        let mut tape = Tape::new();
        let tv = tape.constant(tokens);
        let pv = tape.constant(proj);
        let cv = tape.constant(cats);
        let b = NormBox::new(0.2, 0.2, 0.8, 0.8).unwrap();
        let z = vlm_score(&mut tape, tv, pv, &b, cv, 0.01, 4, 2).unwrap();
        for &v in tape.value(z).data() {
            assert!((v - 1.0 / 3.0).abs() <= 1e-9);
        }
    }
}
