//! Category embedding tables: prompt-template averages from the frozen text
//! encoder, a learnable background row, and the base/novel partition.

use crate::pretrain::{encode_text, ClipSetup, TextBatch, VlmParams};
use crate::rng;
use crate::tensor::{Real, Tape, Tensor};
use crate::{Error, Result};

/// Named unit-norm text embeddings with a base/novel split. The background
/// row is stored separately because it is a trainable parameter; it occupies
/// index 0 of every score vector built from the table.
#[derive(Clone, Debug)]
pub struct CategoryTable<T> {
    pub names: Vec<String>,
    /// `[n, joint]`, one unit-norm row per name.
    pub embeddings: Tensor<T>,
    /// True where the category is novel (held out from finetuning).
    pub novel: Vec<bool>,
}

impl<T: Real> CategoryTable<T> {
    pub fn validate(&self) -> Result<()> {
        if self.names.len() != self.embeddings.rows() || self.names.len() != self.novel.len() {
            return Err(Error::Invalid("category table length mismatch".into()));
        }
        for i in 0..self.embeddings.rows() {
            let n: f64 = self.embeddings.row(i).iter().map(|&v| (v * v).to_f64()).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-5 {
                return Err(Error::Invalid(format!("category row {i} has norm {n}")));
            }
        }
        Ok(())
    }

    pub fn base_indices(&self) -> Vec<usize> {
        (0..self.names.len()).filter(|&i| !self.novel[i]).collect()
    }

    pub fn novel_indices(&self) -> Vec<usize> {
        (0..self.names.len()).filter(|&i| self.novel[i]).collect()
    }

    /// Rows restricted to the base categories (the training-time table).
    pub fn base_embeddings(&self) -> Tensor<T> {
        let idx = self.base_indices();
        let d = self.embeddings.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            data.extend_from_slice(self.embeddings.row(i));
        }
        Tensor::new(vec![idx.len(), d], data)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Average each category's prompt-template embeddings and re-normalize.
pub fn category_embeddings<T: Real>(
    names: &[(String, bool)],
    templates: &[String],
    vlm: &VlmParams<Tensor<T>>,
    setup: &ClipSetup,
    vocab: &crate::pretrain::Vocab,
) -> Result<CategoryTable<T>> {
    if names.is_empty() || templates.is_empty() {
        return Err(Error::Invalid("category table needs names and templates".into()));
    }
    let mut tape = Tape::new();
    let text_params = vlm.text.map(&mut |t| tape.constant(t.clone()));
    let joint = vlm.text.proj.cols();
    let mut rows: Vec<Vec<T>> = Vec::with_capacity(names.len());
    for (name, _) in names {
        let phrases: Vec<Vec<u32>> = templates
            .iter()
            .map(|t| {
                let phrase = if t.contains("{}") {
                    t.replace("{}", name)
                } else {
                    return Err(Error::Invalid(format!("template '{t}' has no {{}} placeholder")));
                };
                vocab.encode(&phrase)
            })
            .collect::<Result<_>>()?;
        let max_len = phrases.iter().map(Vec::len).max().unwrap_or(1).max(setup.text_cfg.max_len);
        let batch = TextBatch::new(phrases, max_len)?;
        let cfg = crate::pretrain::TextConfig { max_len, ..setup.text_cfg };
        let embs = encode_text(&mut tape, &batch, &text_params, &cfg)?;
        let mean = tape.mean_rows(embs);
        let unit = tape.l2_normalize_rows(mean)?;
        rows.push(tape.value(unit).data().to_vec());
    }
    let mut data = Vec::with_capacity(names.len() * joint);
    for r in &rows {
        data.extend_from_slice(r);
    }
    let table = CategoryTable {
        names: names.iter().map(|(n, _)| n.clone()).collect(),
        embeddings: Tensor::new(vec![names.len(), joint], data),
        novel: names.iter().map(|&(_, novel)| novel).collect(),
    };
    table.validate()?;
    Ok(table)
}

/// Fixed unit vector orthogonalized against the given category embeddings —
/// the initialization of the learnable background row.
pub fn init_background<T: Real>(embeddings: &Tensor<T>, seed: u64) -> Result<Tensor<T>> {
    let d = embeddings.cols();
    let mut r = rng::stream(seed, "background-init");
    let mut v: Vec<f64> = (0..d).map(|_| rng::gaussian(&mut r)).collect();
    // Orthonormal basis of the category span (modified Gram-Schmidt), then
    // remove the projection of v onto each basis vector.
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for i in 0..embeddings.rows() {
        let mut u: Vec<f64> = embeddings.row(i).iter().map(|&e| e.to_f64()).collect();
        for b in &basis {
            let dot: f64 = b.iter().zip(&u).map(|(&x, &y)| x * y).sum();
            for (ui, &bi) in u.iter_mut().zip(b) {
                *ui -= dot * bi;
            }
        }
        let norm: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-10 {
            for ui in &mut u {
                *ui /= norm;
            }
            basis.push(u);
        }
    }
    for b in &basis {
        let dot: f64 = b.iter().zip(&v).map(|(&x, &y)| x * y).sum();
        for (vi, &bi) in v.iter_mut().zip(b) {
            *vi -= dot * bi;
        }
    }
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-8 {
        return Err(Error::Invalid("background direction collapsed during orthogonalization".into()));
    }
    Ok(Tensor::new(vec![1, d], v.into_iter().map(|x| T::from_f64(x / norm)).collect()))
}
