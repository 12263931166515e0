//! Minimal numeric substrate: dense tensors, a reverse-mode tape, and a
//! finite-difference gradient checking harness.
//!
//! Training runs in `f32`; gradient and oracle tests instantiate the same
//! code in `f64`. Everything is generic over [`Real`] to allow both.

mod gradcheck;
mod kernels;
mod ops;
mod sampling;
mod tape;

pub use gradcheck::{finite_diff_check, GradCheckOptions, GradReport};
pub use sampling::{bilinear_terms, norm_to_cell, resize_region_terms};
pub use tape::{Gradients, Tape, Var};

use crate::{Error, Result};

/// Scalar type of the pipeline: `f32` for training, `f64` for checks.
pub trait Real:
    num_traits::Float
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor. Rank is dynamic; most of the pipeline uses
/// matrices `[n, d]` and feature grids `[h, w, c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); numel] }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let n = rows.len();
        let d = if n == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(n * d);
        for r in rows {
            assert_eq!(r.len(), d, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor { shape: vec![n, d], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Number of rows when viewed as a matrix `[n, d]` (rank-2 only).
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "expected matrix, got {:?}", self.shape);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "expected matrix, got {:?}", self.shape);
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let d = self.cols();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn at(&self, idx: &[usize]) -> T {
        assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &dim)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for dim {i} ({dim})");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn set(&mut self, idx: &[usize], v: T) {
        let mut flat = 0;
        for (&ix, &dim) in idx.iter().zip(&self.shape) {
            flat = flat * dim + ix;
        }
        self.data[flat] = v;
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.data.len(), "reshape {:?} -> {:?}", self.shape, shape);
        self.shape = shape;
        self
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise accumulate `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| v.to_f64() as f32).collect() }
    }

    pub fn from_f32(src: &Tensor<f32>) -> Tensor<T> {
        Tensor { shape: src.shape.clone(), data: src.data.iter().map(|&v| T::from_f64(v as f64)).collect() }
    }
}

/// An `(h, w, c)` dense feature map in row-major order — the universal
/// spatial tensor of the pipeline (images, token grids, pyramid levels,
/// heatmaps).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid<T> {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<T>,
}

impl<T: Real> FeatureGrid<T> {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "feature grid dims must be >= 1, got ({height}, {width}, {channels})"
            )));
        }
        if values.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "feature grid data length {} != {}x{}x{}",
                values.len(),
                height,
                width,
                channels
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("feature grid holds non-finite values".into()));
        }
        Ok(FeatureGrid { height, width, channels, values })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        FeatureGrid { height, width, channels, values: vec![T::zero(); height * width * channels] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> T {
        self.values[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        self.values[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[T] {
        let base = (y * self.width + x) * self.channels;
        &self.values[base..base + self.channels]
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(vec![self.height, self.width, self.channels], self.values.clone())
    }

    pub fn from_tensor(t: &Tensor<T>) -> Self {
        let s = t.shape();
        assert_eq!(s.len(), 3, "expected [h, w, c] tensor, got {:?}", s);
        FeatureGrid { height: s[0], width: s[1], channels: s[2], values: t.data().to_vec() }
    }

    /// Plain bilinear downscale/upscale with the cell-center convention
    /// (used for resizing dataset images between training resolutions).
    pub fn resize(&self, out_h: usize, out_w: usize) -> Self {
        let mut out = FeatureGrid::zeros(out_h, out_w, self.channels);
        for oy in 0..out_h {
            // Map the output cell center back into input cell coordinates.
            let sy = (oy as f64 + 0.5) * self.height as f64 / out_h as f64 - 0.5;
            for ox in 0..out_w {
                let sx = (ox as f64 + 0.5) * self.width as f64 / out_w as f64 - 0.5;
                let (y0, x0, wy, wx) = bilinear_corner(sy, sx, self.height, self.width);
                for c in 0..self.channels {
                    let v00 = self.at(y0, x0, c).to_f64();
                    let v01 = self.at(y0, (x0 + 1).min(self.width - 1), c).to_f64();
                    let v10 = self.at((y0 + 1).min(self.height - 1), x0, c).to_f64();
                    let v11 = self
                        .at((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1), c)
                        .to_f64();
                    let v = v00 * (1.0 - wy) * (1.0 - wx)
                        + v01 * (1.0 - wy) * wx
                        + v10 * wy * (1.0 - wx)
                        + v11 * wy * wx;
                    out.set(oy, ox, c, T::from_f64(v));
                }
            }
        }
        out
    }
}

/// Clamped top-left corner and fractional weights for a continuous sample
/// point in cell-center coordinates.
fn bilinear_corner(y: f64, x: f64, h: usize, w: usize) -> (usize, usize, f64, f64) {
    let yc = y.clamp(0.0, (h - 1) as f64);
    let xc = x.clamp(0.0, (w - 1) as f64);
    let y0 = yc.floor().min((h - 1) as f64);
    let x0 = xc.floor().min((w - 1) as f64);
    (y0 as usize, x0 as usize, yc - y0, xc - x0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_roundtrip_and_indexing() {
        let t = Tensor::<f64>::new(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(t.rows(), 2);
        assert_eq!(t.cols(), 3);
        assert_eq!(t.at(&[1, 2]), 5.0);
        assert_eq!(t.row(1), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn grid_rejects_bad_shapes() {
        assert!(FeatureGrid::<f32>::new(0, 1, 1, vec![]).is_err());
        assert!(FeatureGrid::<f32>::new(1, 1, 1, vec![1.0, 2.0]).is_err());
        assert!(FeatureGrid::<f32>::new(1, 1, 1, vec![f32::NAN]).is_err());
    }

    #[test]
    fn resize_identity_on_same_size() {
        let g = FeatureGrid::<f64>::new(2, 2, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let r = g.resize(2, 2);
        assert_eq!(r.values(), g.values());
    }

    #[test]
    fn resize_constant_map_stays_constant() {
        let g = FeatureGrid::<f64>::new(4, 4, 2, vec![7.5; 32]).unwrap();
        let r = g.resize(3, 5);
        assert!(r.values().iter().all(|&v| (v - 7.5).abs() < 1e-12));
    }
}
