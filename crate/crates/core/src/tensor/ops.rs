//! Differentiable operations. Each op computes its value eagerly and, when
//! some parent tracks gradients, records an adjoint closure capturing the
//! values it needs.

use crate::{Error, Result};

use super::kernels;
use super::tape::{BackFn, Tape, Var};
use super::{Real, Tensor};

impl<T: Real> Tape<T> {
    fn unary_back(&mut self, value: Tensor<T>, parent: Var, back: impl FnOnce() -> BackFn<T>) -> Var {
        let rg = self.requires_grad(parent);
        let back = if rg { Some(back()) } else { None };
        self.push(value, rg, back)
    }

    fn binary_back(
        &mut self,
        value: Tensor<T>,
        a: Var,
        b: Var,
        back: impl FnOnce(bool, bool) -> BackFn<T>,
    ) -> Var {
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        let back = if ra || rb { Some(back(ra, rb)) } else { None };
        self.push(value, ra || rb, back)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data);
        self.binary_back(out, a, b, |ra, rb| {
            Box::new(move |g, t| {
                if ra {
                    t.accumulate(a, g.clone());
                }
                if rb {
                    t.accumulate(b, g.clone());
                }
            })
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "sub shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::new(av.shape().to_vec(), data);
        self.binary_back(out, a, b, |ra, rb| {
            Box::new(move |g, t| {
                if ra {
                    t.accumulate(a, g.clone());
                }
                if rb {
                    t.accumulate(b, g.map(|v| -v));
                }
            })
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data);
        let (a_val, b_val) = (av.clone(), bv.clone());
        self.binary_back(out, a, b, move |ra, rb| {
            Box::new(move |g, t| {
                if ra {
                    let d = g.data().iter().zip(b_val.data()).map(|(&gv, &bv)| gv * bv).collect();
                    t.accumulate(a, Tensor::new(b_val.shape().to_vec(), d));
                }
                if rb {
                    let d = g.data().iter().zip(a_val.data()).map(|(&gv, &av)| gv * av).collect();
                    t.accumulate(b, Tensor::new(a_val.shape().to_vec(), d));
                }
            })
        })
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.unary_back(out, x, || Box::new(move |g, t| t.accumulate(x, g.map(|v| v * c))))
    }

    /// Broadcast-add a `[d]` bias to every row of `[n, d]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (n, d) = (xv.rows(), xv.cols());
        assert_eq!(bv.numel(), d, "bias length mismatch");
        let mut data = xv.data().to_vec();
        for i in 0..n {
            for (o, &b) in data[i * d..(i + 1) * d].iter_mut().zip(bv.data()) {
                *o = *o + b;
            }
        }
        let out = Tensor::new(vec![n, d], data);
        self.binary_back(out, x, bias, move |ra, rb| {
            Box::new(move |g, t| {
                if ra {
                    t.accumulate(x, g.clone());
                }
                if rb {
                    let mut db = vec![T::zero(); d];
                    for i in 0..n {
                        for (o, &gv) in db.iter_mut().zip(&g.data()[i * d..(i + 1) * d]) {
                            *o = *o + gv;
                        }
                    }
                    t.accumulate(bias, Tensor::new(vec![d], db));
                }
            })
        })
    }

    /// Broadcast-multiply every row of `[n, d]` by a `[d]` gain.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Var {
        let (xv, gv) = (self.value(x), self.value(gain));
        let (n, d) = (xv.rows(), xv.cols());
        assert_eq!(gv.numel(), d, "gain length mismatch");
        let mut data = xv.data().to_vec();
        for i in 0..n {
            for (o, &m) in data[i * d..(i + 1) * d].iter_mut().zip(gv.data()) {
                *o = *o * m;
            }
        }
        let out = Tensor::new(vec![n, d], data);
        let (x_val, g_val) = (xv.clone(), gv.clone());
        self.binary_back(out, x, gain, move |ra, rb| {
            Box::new(move |g, t| {
                if ra {
                    let mut dx = g.data().to_vec();
                    for i in 0..n {
                        for (o, &m) in dx[i * d..(i + 1) * d].iter_mut().zip(g_val.data()) {
                            *o = *o * m;
                        }
                    }
                    t.accumulate(x, Tensor::new(vec![n, d], dx));
                }
                if rb {
                    let mut dg = vec![T::zero(); d];
                    for i in 0..n {
                        for j in 0..d {
                            dg[j] = dg[j] + g.data()[i * d + j] * x_val.data()[i * d + j];
                        }
                    }
                    t.accumulate(gain, Tensor::new(vec![d], dg));
                }
            })
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (k2, n) = (bv.rows(), bv.cols());
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let out = Tensor::new(vec![m, n], kernels::matmul(av.data(), bv.data(), m, k, n));
        let (a_val, b_val) = (av.clone(), bv.clone());
        self.binary_back(out, a, b, move |ra, rb| {
            Box::new(move |g, t| {
                if ra {
                    // dA = g @ B^T
                    let da = kernels::matmul_nt(g.data(), b_val.data(), m, n, k);
                    t.accumulate(a, Tensor::new(vec![m, k], da));
                }
                if rb {
                    // dB = A^T @ g
                    let a_t = kernels::transpose(a_val.data(), m, k);
                    let db = kernels::matmul(&a_t, g.data(), k, m, n);
                    t.accumulate(b, Tensor::new(vec![k, n], db));
                }
            })
        })
    }

    /// `a[m, k] @ b[n, k]^T -> [m, n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (n, k2) = (bv.rows(), bv.cols());
        assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
        let out = Tensor::new(vec![m, n], kernels::matmul_nt(av.data(), bv.data(), m, k, n));
        let (a_val, b_val) = (av.clone(), bv.clone());
        self.binary_back(out, a, b, move |ra, rb| {
            Box::new(move |g, t| {
                if ra {
                    // dA = g @ B
                    let da = kernels::matmul(g.data(), b_val.data(), m, n, k);
                    t.accumulate(a, Tensor::new(vec![m, k], da));
                }
                if rb {
                    // dB = g^T @ A
                    let g_t = kernels::transpose(g.data(), m, n);
                    let db = kernels::matmul(&g_t, a_val.data(), n, m, k);
                    t.accumulate(b, Tensor::new(vec![n, k], db));
                }
            })
        })
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        let out = Tensor::new(vec![n, m], kernels::transpose(xv.data(), m, n));
        self.unary_back(out, x, || {
            Box::new(move |g, t| {
                t.accumulate(x, Tensor::new(vec![m, n], kernels::transpose(g.data(), n, m)))
            })
        })
    }

    /// Numerically stabilized softmax over each row of an `[n, d]` matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let y = kernels::softmax_rows(xv.data(), n, d);
        let out = Tensor::new(vec![n, d], y.clone());
        self.unary_back(out, x, move || {
            Box::new(move |g, t| {
                let mut dx = vec![T::zero(); n * d];
                for i in 0..n {
                    let yr = &y[i * d..(i + 1) * d];
                    let gr = &g.data()[i * d..(i + 1) * d];
                    let dot = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum::<T>();
                    for j in 0..d {
                        dx[i * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                t.accumulate(x, Tensor::new(vec![n, d], dx));
            })
        })
    }

    /// Per-row layer normalization without affine terms.
    pub fn layer_norm_rows(&mut self, x: Var, eps: T) -> Var {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let (y, inv_std) = kernels::layer_norm_rows(xv.data(), n, d, eps);
        let out = Tensor::new(vec![n, d], y.clone());
        self.unary_back(out, x, move || {
            Box::new(move |g, t| {
                let dn = T::from_usize(d);
                let mut dx = vec![T::zero(); n * d];
                for i in 0..n {
                    let yr = &y[i * d..(i + 1) * d];
                    let gr = &g.data()[i * d..(i + 1) * d];
                    let mean_g = gr.iter().copied().sum::<T>() / dn;
                    let mean_gy = gr.iter().zip(yr).map(|(&gv, &yv)| gv * yv).sum::<T>() / dn;
                    for j in 0..d {
                        dx[i * d + j] = inv_std[i] * (gr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
                t.accumulate(x, Tensor::new(vec![n, d], dx));
            })
        })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = xv.map(kernels::gelu);
        let x_val = xv.clone();
        self.unary_back(out, x, move || {
            Box::new(move |g, t| {
                let d = g
                    .data()
                    .iter()
                    .zip(x_val.data())
                    .map(|(&gv, &xv)| gv * kernels::gelu_grad(xv))
                    .collect();
                t.accumulate(x, Tensor::new(x_val.shape().to_vec(), d));
            })
        })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.exp());
        let y_val = y.clone();
        self.unary_back(y, x, move || {
            Box::new(move |g, t| {
                let d = g.data().iter().zip(y_val.data()).map(|(&gv, &yv)| gv * yv).collect();
                t.accumulate(x, Tensor::new(y_val.shape().to_vec(), d));
            })
        })
    }

    /// Multiply every element of `x` by a scalar node `s` (shape `[1]`).
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        let sv = self.scalar_value(s);
        let xv = self.value(x);
        let out = xv.map(|v| v * sv);
        let x_val = xv.clone();
        self.binary_back(out, x, s, move |ra, rb| {
            Box::new(move |g, t| {
                if ra {
                    t.accumulate(x, g.map(|v| v * sv));
                }
                if rb {
                    let dot = g.data().iter().zip(x_val.data()).map(|(&gv, &xv)| gv * xv).sum::<T>();
                    t.accumulate(s, Tensor::scalar(dot));
                }
            })
        })
    }

    /// L2-normalize each row of `[n, d]`. Errors if a row norm underflows.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let mut y = vec![T::zero(); n * d];
        let mut inv_norms = vec![T::zero(); n];
        for i in 0..n {
            let row = &xv.data()[i * d..(i + 1) * d];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm.to_f64() < 1e-12 {
                return Err(Error::NonFinite(format!("cannot normalize near-zero vector (row {i})")));
            }
            inv_norms[i] = norm.recip();
            for (o, &v) in y[i * d..(i + 1) * d].iter_mut().zip(row) {
                *o = v * inv_norms[i];
            }
        }
        let out = Tensor::new(vec![n, d], y.clone());
        Ok(self.unary_back(out, x, move || {
            Box::new(move |g, t| {
                let mut dx = vec![T::zero(); n * d];
                for i in 0..n {
                    let yr = &y[i * d..(i + 1) * d];
                    let gr = &g.data()[i * d..(i + 1) * d];
                    let dot = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum::<T>();
                    for j in 0..d {
                        dx[i * d + j] = (gr[j] - yr[j] * dot) * inv_norms[i];
                    }
                }
                t.accumulate(x, Tensor::new(vec![n, d], dx));
            })
        }))
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let inv = T::from_usize(n).recip();
        let mut out = vec![T::zero(); d];
        for i in 0..n {
            for (o, &v) in out.iter_mut().zip(&xv.data()[i * d..(i + 1) * d]) {
                *o = *o + v * inv;
            }
        }
        let out = Tensor::new(vec![1, d], out);
        self.unary_back(out, x, move || {
            Box::new(move |g, t| {
                let mut dx = vec![T::zero(); n * d];
                for i in 0..n {
                    for (o, &gv) in dx[i * d..(i + 1) * d].iter_mut().zip(g.data()) {
                        *o = gv * inv;
                    }
                }
                t.accumulate(x, Tensor::new(vec![n, d], dx));
            })
        })
    }

    /// Component-wise max over the rows of `[n, d]` -> `[1, d]`. Ties route
    /// the gradient to the first maximal row.
    pub fn max_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        assert!(n >= 1, "max over empty set");
        let mut out = xv.data()[..d].to_vec();
        let mut arg = vec![0usize; d];
        for i in 1..n {
            for j in 0..d {
                let v = xv.data()[i * d + j];
                if v > out[j] {
                    out[j] = v;
                    arg[j] = i;
                }
            }
        }
        let out = Tensor::new(vec![1, d], out);
        self.unary_back(out, x, move || {
            Box::new(move |g, t| {
                let mut dx = vec![T::zero(); n * d];
                for j in 0..d {
                    dx[arg[j] * d + j] = g.data()[j];
                }
                t.accumulate(x, Tensor::new(vec![n, d], dx));
            })
        })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let s = xv.data().iter().copied().sum::<T>();
        self.unary_back(Tensor::scalar(s), x, move || {
            Box::new(move |g, t| {
                let gv = g.data()[0];
                t.accumulate(x, Tensor::full(shape, gv));
            })
        })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum_all(x);
        self.scale(s, T::from_usize(n).recip())
    }

    /// Mean of softmax cross-entropy per row against integer targets.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        let (n, d) = (lv.rows(), lv.cols());
        assert_eq!(targets.len(), n, "target count mismatch");
        let probs = kernels::softmax_rows(lv.data(), n, d);
        let mut loss = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < d, "target {t} out of range {d}");
            let row = &lv.data()[i * d..(i + 1) * d];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss = loss + (lse - row[t]);
        }
        loss = loss / T::from_usize(n);
        let targets = targets.to_vec();
        self.unary_back(Tensor::scalar(loss), logits, move || {
            Box::new(move |g, t| {
                let scale = g.data()[0] / T::from_usize(n);
                let mut dx = probs;
                for (i, &tgt) in targets.iter().enumerate() {
                    dx[i * d + tgt] = dx[i * d + tgt] - T::one();
                }
                for v in &mut dx {
                    *v = *v * scale;
                }
                t.accumulate(logits, Tensor::new(vec![n, d], dx));
            })
        })
    }

    /// Select rows of `[n, d]` by index (duplicates allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            assert!(r < n, "row index {r} out of bounds {n}");
            data.extend_from_slice(&xv.data()[r * d..(r + 1) * d]);
        }
        let out = Tensor::new(vec![rows.len(), d], data);
        let rows = rows.to_vec();
        self.unary_back(out, x, move || {
            Box::new(move |g, t| {
                let mut dx = vec![T::zero(); n * d];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        dx[r * d + j] = dx[r * d + j] + g.data()[i * d + j];
                    }
                }
                t.accumulate(x, Tensor::new(vec![n, d], dx));
            })
        })
    }

    /// General flat gather. `idx[i]` selects the source element of output
    /// element `i`; `-1` produces a zero (used for conv padding).
    pub fn gather_flat(&mut self, x: Var, idx: &[isize], out_shape: Vec<usize>) -> Var {
        let xv = self.value(x);
        let src_len = xv.numel();
        assert_eq!(idx.len(), out_shape.iter().product::<usize>());
        let data = idx
            .iter()
            .map(|&i| {
                if i < 0 {
                    T::zero()
                } else {
                    xv.data()[usize::try_from(i).unwrap().min(src_len - 1)]
                }
            })
            .collect();
        let out = Tensor::new(out_shape, data);
        let idx = idx.to_vec();
        let src_shape = xv.shape().to_vec();
        self.unary_back(out, x, move || {
            Box::new(move |g, t| {
                let mut dx = vec![T::zero(); src_len];
                for (&i, &gv) in idx.iter().zip(g.data()) {
                    if i >= 0 {
                        let i = i as usize;
                        dx[i] = dx[i] + gv;
                    }
                }
                t.accumulate(x, Tensor::new(src_shape, dx));
            })
        })
    }

    /// Contiguous column slice of `[n, d]`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        assert!(start + len <= d, "column slice out of bounds");
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&xv.data()[i * d + start..i * d + start + len]);
        }
        let out = Tensor::new(vec![n, len], data);
        self.unary_back(out, x, move || {
            Box::new(move |g, t| {
                let mut dx = vec![T::zero(); n * d];
                for i in 0..n {
                    dx[i * d + start..i * d + start + len].copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                t.accumulate(x, Tensor::new(vec![n, d], dx));
            })
        })
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                let pv = self.value(p);
                assert_eq!(pv.rows(), n);
                data.extend_from_slice(&pv.data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new(vec![n, total], data);
        let rg: Vec<bool> = parts.iter().map(|&p| self.requires_grad(p)).collect();
        let any = rg.iter().any(|&b| b);
        let parts = parts.to_vec();
        let back: Option<BackFn<T>> = if any {
            Some(Box::new(move |g, t| {
                let mut offset = 0;
                for ((&p, &w), &want) in parts.iter().zip(&widths).zip(&rg) {
                    if want {
                        let mut d = Vec::with_capacity(n * w);
                        for i in 0..n {
                            d.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                        }
                        t.accumulate(p, Tensor::new(vec![n, w], d));
                    }
                    offset += w;
                }
            }))
        } else {
            None
        };
        self.push(out, any, back)
    }

    /// Concatenate matrices with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let d = self.value(parts[0]).cols();
        let heights: Vec<usize> = parts.iter().map(|&p| self.value(p).rows()).collect();
        let total: usize = heights.iter().sum();
        let mut data = Vec::with_capacity(total * d);
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), d);
            data.extend_from_slice(pv.data());
        }
        let out = Tensor::new(vec![total, d], data);
        let rg: Vec<bool> = parts.iter().map(|&p| self.requires_grad(p)).collect();
        let any = rg.iter().any(|&b| b);
        let parts = parts.to_vec();
        let back: Option<BackFn<T>> = if any {
            Some(Box::new(move |g, t| {
                let mut offset = 0;
                for ((&p, &h), &want) in parts.iter().zip(&heights).zip(&rg) {
                    if want {
                        let d_part = g.data()[offset * d..(offset + h) * d].to_vec();
                        t.accumulate(p, Tensor::new(vec![h, d], d_part));
                    }
                    offset += h;
                }
            }))
        } else {
            None
        };
        self.push(out, any, back)
    }

    /// Circular shift of an `[h, w, c]` grid: output `[(i+dy) mod h][(j+dx) mod w]
    /// = x[i][j]`. The adjoint is the roll by the negated shift, making the
    /// gradient an exact permutation.
    pub fn roll2d(&mut self, x: Var, dy: i64, dx: i64) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        assert_eq!(s.len(), 3, "roll2d expects [h, w, c]");
        let (h, w, c) = (s[0], s[1], s[2]);
        let out = Tensor::new(vec![h, w, c], roll_data(xv.data(), h, w, c, dy, dx));
        self.unary_back(out, x, move || {
            Box::new(move |g, t| {
                t.accumulate(x, Tensor::new(vec![h, w, c], roll_data(g.data(), h, w, c, -dy, -dx)));
            })
        })
    }

    /// Linear combination over spatial cells of an `[h, w, c]` grid: output
    /// row `i` is `sum_k w_ik * x[cell_ik, :]`. This is the workhorse behind
    /// bilinear sampling, RoI-Align and positional-embedding crop-resize;
    /// the sample geometry is fixed, so the op is linear in `x`.
    pub fn cell_combine(&mut self, x: Var, terms: &[Vec<(u32, T)>]) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        assert_eq!(s.len(), 3, "cell_combine expects [h, w, c]");
        let (h, w, c) = (s[0], s[1], s[2]);
        let cells = h * w;
        let n = terms.len();
        let mut data = vec![T::zero(); n * c];
        for (i, row_terms) in terms.iter().enumerate() {
            for &(cell, weight) in row_terms {
                let cell = cell as usize;
                assert!(cell < cells, "cell index out of range");
                let src = &xv.data()[cell * c..(cell + 1) * c];
                for (o, &v) in data[i * c..(i + 1) * c].iter_mut().zip(src) {
                    *o = *o + v * weight;
                }
            }
        }
        let out = Tensor::new(vec![n, c], data);
        let terms = terms.to_vec();
        self.unary_back(out, x, move || {
            Box::new(move |g, t| {
                let mut dx = vec![T::zero(); cells * c];
                for (i, row_terms) in terms.iter().enumerate() {
                    let gr = &g.data()[i * c..(i + 1) * c];
                    for &(cell, weight) in row_terms {
                        let cell = cell as usize;
                        for (o, &gv) in dx[cell * c..(cell + 1) * c].iter_mut().zip(gr) {
                            *o = *o + gv * weight;
                        }
                    }
                }
                t.accumulate(x, Tensor::new(vec![h, w, c], dx));
            })
        })
    }

    /// 2x2 max pooling with stride 2 on an `[h, w, c]` grid (even sides).
    pub fn maxpool2x2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        assert_eq!(s.len(), 3, "maxpool2x2 expects [h, w, c]");
        let (h, w, c) = (s[0], s[1], s[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "maxpool2x2 needs even sides");
        let (oh, ow) = (h / 2, w / 2);
        let mut data = vec![T::zero(); oh * ow * c];
        let mut arg = vec![0usize; oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = T::neg_infinity();
                    let mut best_at = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let flat = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                            if xv.data()[flat] > best {
                                best = xv.data()[flat];
                                best_at = flat;
                            }
                        }
                    }
                    let o = (oy * ow + ox) * c + ch;
                    data[o] = best;
                    arg[o] = best_at;
                }
            }
        }
        let out = Tensor::new(vec![oh, ow, c], data);
        self.unary_back(out, x, move || {
            Box::new(move |g, t| {
                let mut dx = vec![T::zero(); h * w * c];
                for (o, &src) in arg.iter().enumerate() {
                    dx[src] = dx[src] + g.data()[o];
                }
                t.accumulate(x, Tensor::new(vec![h, w, c], dx));
            })
        })
    }

    /// Mean smooth-L1 (Huber) loss against a constant target.
    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor<T>, beta: T) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "smooth_l1 shape mismatch");
        let n = pv.numel();
        let half = T::from_f64(0.5);
        let mut loss = T::zero();
        let mut diffs = Vec::with_capacity(n);
        for (&p, &t) in pv.data().iter().zip(target.data()) {
            let d = p - t;
            diffs.push(d);
            let a = d.abs();
            loss = loss + if a < beta { half * d * d / beta } else { a - half * beta };
        }
        loss = loss / T::from_usize(n);
        let shape = pv.shape().to_vec();
        self.unary_back(Tensor::scalar(loss), pred, move || {
            Box::new(move |g, t| {
                let scale = g.data()[0] / T::from_usize(n);
                let dx = diffs
                    .iter()
                    .map(|&d| (d / beta).max(-T::one()).min(T::one()) * scale)
                    .collect();
                t.accumulate(pred, Tensor::new(shape, dx));
            })
        })
    }

    /// Weighted mean of per-element binary cross-entropy with logits.
    pub fn bce_logits(&mut self, logits: Var, labels: &Tensor<T>, weights: &Tensor<T>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape(), labels.shape());
        assert_eq!(lv.shape(), weights.shape());
        let wsum = weights.data().iter().copied().sum::<T>();
        assert!(wsum > T::zero(), "bce_logits needs positive total weight");
        let mut loss = T::zero();
        for ((&x, &y), &w) in lv.data().iter().zip(labels.data()).zip(weights.data()) {
            // max(x,0) - x*y + ln(1 + exp(-|x|))
            let term = x.max(T::zero()) - x * y + (T::one() + (-x.abs()).exp()).ln();
            loss = loss + w * term;
        }
        loss = loss / wsum;
        let labels = labels.clone();
        let weights = weights.clone();
        let x_val = lv.clone();
        self.unary_back(Tensor::scalar(loss), logits, move || {
            Box::new(move |g, t| {
                let scale = g.data()[0] / wsum;
                let dx = x_val
                    .data()
                    .iter()
                    .zip(labels.data())
                    .zip(weights.data())
                    .map(|((&x, &y), &w)| (kernels::sigmoid(x) - y) * w * scale)
                    .collect();
                t.accumulate(logits, Tensor::new(x_val.shape().to_vec(), dx));
            })
        })
    }

    /// Metadata-only reshape.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let xv = self.value(x);
        let old = xv.shape().to_vec();
        let out = xv.clone().reshape(shape);
        self.unary_back(out, x, move || {
            Box::new(move |g, t| {
                t.accumulate(x, g.clone().reshape(old));
            })
        })
    }
}

fn roll_data<T: Real>(x: &[T], h: usize, w: usize, c: usize, dy: i64, dx: i64) -> Vec<T> {
    let dy = dy.rem_euclid(h as i64) as usize;
    let dx = dx.rem_euclid(w as i64) as usize;
    let mut out = vec![T::zero(); x.len()];
    for i in 0..h {
        let oi = (i + dy) % h;
        for j in 0..w {
            let oj = (j + dx) % w;
            let src = (i * w + j) * c;
            let dst = (oi * w + oj) * c;
            out[dst..dst + c].copy_from_slice(&x[src..src + c]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, c: usize, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(vec![h, w, c], data)
    }

    #[test]
    fn roll_shifts_circularly() {
        let mut tape = Tape::new();
        let x = tape.constant(grid(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.roll2d(x, 1, 1);
        assert_eq!(tape.value(y).data(), &[4.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn roll_full_period_is_identity() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let x = tape.constant(grid(3, 4, 2, data.clone()));
        let y = tape.roll2d(x, 3, 4);
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn roll_inverse_is_exact() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..45).map(|v| (v as f64).sin()).collect();
        let x = tape.constant(grid(3, 5, 3, data.clone()));
        let y = tape.roll2d(x, 2, 2);
        let z = tape.roll2d(y, -2, -2);
        assert_eq!(tape.value(z).data(), &data[..]);
    }

    #[test]
    fn roll_gradient_is_inverse_roll() {
        let mut tape = Tape::new();
        let x = tape.leaf(grid(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.roll2d(x, 1, 0);
        // Pick out the element at (0,0) after rolling; it came from (1,0).
        let picked = tape.gather_flat(y, &[0], vec![1]);
        let grads = tape.backward(picked);
        let g = grads.try_get(x).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn softmax_symmetric_row() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]));
        let y = tape.softmax_rows(x);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2], vec![1000.0, 0.0]));
        let y = tape.softmax_rows(x);
        let v: Vec<f64> = tape.value(y).data().to_vec();
        assert!(v.iter().all(|p| p.is_finite()));
        assert!(v[0] > 1.0 - 1e-9 && v[1] < 1e-9);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 4], (0..12).map(|v| (v as f64).cos()).collect()));
        let y = tape.softmax_rows(x);
        for i in 0..3 {
            let s: f64 = tape.value(y).row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn bilinear_center_of_2x2_is_mean() {
        let mut tape = Tape::new();
        let x = tape.constant(grid(2, 2, 1, vec![0.0, 1.0, 2.0, 3.0]));
        let y = tape.bilinear_sample(x, 0.5, 0.5).unwrap();
        assert!((tape.value(y).data()[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn bilinear_constant_map_anywhere() {
        let mut tape = Tape::new();
        let x = tape.constant(grid(3, 3, 2, vec![4.25; 18]));
        for (y, xc) in [(-3.0, -5.0), (0.0, 0.0), (1.3, 0.7), (10.0, 10.0)] {
            let s = tape.bilinear_sample(x, y, xc).unwrap();
            for &v in tape.value(s).data() {
                assert!((v - 4.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_integer_centers_return_stored_values() {
        let data: Vec<f64> = (0..12).map(|v| (v as f64) * 0.37 - 1.0).collect();
        let mut tape = Tape::new();
        let x = tape.constant(grid(3, 4, 1, data.clone()));
        for i in 0..3 {
            for j in 0..4 {
                let s = tape.bilinear_sample(x, i as f64, j as f64).unwrap();
                assert_eq!(tape.value(s).data()[0], data[i * 4 + j]);
            }
        }
    }

    #[test]
    fn bilinear_rejects_non_finite_coordinates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(grid(2, 2, 1, vec![0.0; 4]));
        assert!(tape.bilinear_sample(x, f64::NAN, 0.0).is_err());
        assert!(tape.bilinear_sample(x, 0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn layer_norm_rows_centers_and_scales() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 8], (0..16).map(|v| (v as f64) * 1.7 - 3.0).collect()));
        let y = tape.layer_norm_rows(x, 1e-6);
        for i in 0..2 {
            let row = tape.value(y).row(i);
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() <= 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() <= 1e-5, "var {var}");
        }
    }

    #[test]
    fn matmul_backward_matches_hand_result() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::new(vec![2, 1], vec![3.0, 4.0]));
        let y = tape.matmul(a, b);
        assert_eq!(tape.value(y).data(), &[11.0]);
        let s = tape.sum_all(y);
        let grads = tape.backward(s);
        assert_eq!(grads.try_get(a).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(grads.try_get(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn constants_record_no_adjoints() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(Tensor::new(vec![2, 2], vec![1.0; 4]));
        let c = tape.matmul(a, b);
        let s = tape.sum_all(c);
        let grads = tape.backward(s);
        assert!(grads.try_get(a).is_none());
        assert!(grads.try_get(b).is_none());
    }

    #[test]
    fn max_rows_routes_gradient_to_argmax() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 5.0, 3.0, 2.0]));
        let m = tape.max_rows(x);
        assert_eq!(tape.value(m).data(), &[3.0, 5.0]);
        let s = tape.sum_all(m);
        let grads = tape.backward(s);
        assert_eq!(grads.try_get(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn l2_normalize_rejects_zero_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]));
        assert!(tape.l2_normalize_rows(x).is_err());
    }

    #[test]
    fn cross_entropy_matches_closed_form() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]));
        let ce = tape.cross_entropy_rows(x, &[0]);
        assert!((tape.scalar_value(ce) - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn maxpool_takes_block_maxima() {
        let mut tape = Tape::new();
        let x = tape.constant(grid(2, 2, 1, vec![1.0, 7.0, 3.0, 2.0]));
        let y = tape.maxpool2x2(x);
        assert_eq!(tape.value(y).data(), &[7.0]);
    }
}
