//! Bilinear sample geometry. One convention everywhere: cell centers sit at
//! integer coordinates, the grid spans `[-0.5, h-0.5] x [-0.5, w-0.5]`, and
//! a normalized coordinate `u` in `[0, 1]` maps to cell coordinate
//! `u * side - 0.5`. Out-of-range points clamp to the border.

use crate::{Error, Result};

use super::tape::{Tape, Var};
use super::Real;

/// Four (cell, weight) interpolation terms for one continuous point.
pub fn bilinear_terms<T: Real>(h: usize, w: usize, y: f64, x: f64) -> Result<Vec<(u32, T)>> {
    if !y.is_finite() || !x.is_finite() {
        return Err(Error::NonFinite(format!("bilinear sample at ({y}, {x})")));
    }
    let yc = y.clamp(0.0, (h - 1) as f64);
    let xc = x.clamp(0.0, (w - 1) as f64);
    let y0 = yc.floor() as usize;
    let x0 = xc.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = yc - y0 as f64;
    let fx = xc - x0 as f64;
    let cell = |yy: usize, xx: usize| (yy * w + xx) as u32;
    let mut terms = Vec::with_capacity(4);
    for (yy, xx, wgt) in [
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x1, (1.0 - fy) * fx),
        (y1, x0, fy * (1.0 - fx)),
        (y1, x1, fy * fx),
    ] {
        if wgt != 0.0 {
            terms.push((cell(yy, xx), T::from_f64(wgt)));
        }
    }
    Ok(terms)
}

/// Map a normalized coordinate to continuous cell coordinates.
pub fn norm_to_cell(u: f64, side: usize) -> f64 {
    u * side as f64 - 0.5
}

/// Interpolation terms for resizing the `box_` region of an `src_side`-sided
/// grid to an `out_h x out_w` grid, row-major over output cells.
pub fn resize_region_terms<T: Real>(
    src_h: usize,
    src_w: usize,
    box_: (f64, f64, f64, f64),
    out_h: usize,
    out_w: usize,
) -> Result<Vec<Vec<(u32, T)>>> {
    let (x0, y0, x1, y1) = box_;
    let mut terms = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let v = y0 + (i as f64 + 0.5) / out_h as f64 * (y1 - y0);
        let cy = norm_to_cell(v, src_h);
        for j in 0..out_w {
            let u = x0 + (j as f64 + 0.5) / out_w as f64 * (x1 - x0);
            let cx = norm_to_cell(u, src_w);
            terms.push(bilinear_terms(src_h, src_w, cy, cx)?);
        }
    }
    Ok(terms)
}

impl<T: Real> Tape<T> {
    /// Differentiable bilinear sample of an `[h, w, c]` grid at one point in
    /// continuous cell coordinates. Returns a `[1, c]` node.
    pub fn bilinear_sample(&mut self, x: Var, y: f64, xcoord: f64) -> Result<Var> {
        let s = self.value(x).shape();
        assert_eq!(s.len(), 3, "bilinear_sample expects [h, w, c]");
        let terms = bilinear_terms::<T>(s[0], s[1], y, xcoord)?;
        Ok(self.cell_combine(x, &[terms]))
    }

    /// Differentiable bilinear resize of the `box_` region of an `[h, w, c]`
    /// grid onto an `out_h x out_w` grid.
    pub fn resize_region(
        &mut self,
        x: Var,
        box_: (f64, f64, f64, f64),
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 3, "resize_region expects [h, w, c]");
        let terms = resize_region_terms::<T>(s[0], s[1], box_, out_h, out_w)?;
        let flat = self.cell_combine(x, &terms);
        Ok(self.reshape(flat, vec![out_h, out_w, s[2]]))
    }
}
