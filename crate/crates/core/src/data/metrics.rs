//! Localization and retrieval metrics.

use crate::boxes::NormBox;
use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

/// Fraction of samples whose heatmap argmax point falls inside the target
/// box. Points are normalized `(x, y)` coordinates.
pub fn pointing_game(samples: &[((f64, f64), NormBox)]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let hits = samples
        .iter()
        .filter(|((x, y), b)| b.contains_point(*x, *y))
        .count();
    hits as f64 / samples.len() as f64
}

/// Recall@k of matched image/text pairs under cosine ranking. Row `i` of
/// both matrices is a matched pair.
pub fn retrieval_recall<T: Real>(
    image_emb: &Tensor<T>,
    text_emb: &Tensor<T>,
    k: usize,
) -> Result<f64> {
    let n = image_emb.rows();
    if n == 0 || text_emb.rows() != n || image_emb.cols() != text_emb.cols() {
        return Err(Error::Invalid("retrieval needs matched non-empty embedding sets".into()));
    }
    if k == 0 {
        return Err(Error::Invalid("k must be >= 1".into()));
    }
    let mut hits = 0usize;
    for i in 0..n {
        let row = image_emb.row(i);
        let own: f64 = row.iter().zip(text_emb.row(i)).map(|(&a, &b)| (a * b).to_f64()).sum();
        // Rank of the true caption: texts scoring strictly higher, ties
        // broken toward the lower index.
        let mut better = 0usize;
        for j in 0..n {
            if j == i {
                continue;
            }
            let s: f64 = row.iter().zip(text_emb.row(j)).map(|(&a, &b)| (a * b).to_f64()).sum();
            if s > own || (s == own && j < i) {
                better += 1;
            }
        }
        if better < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}
