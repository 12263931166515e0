//! Small conv kernels on `[h, w, c]` grids, built from gathers and matmuls.

use crate::params::param_fields;
use crate::tensor::{Real, Tape, Var};

/// 2x2 stride-2 transposed convolution: weight `[c_in, 4 * c_out]`.
pub struct DeconvParams<P> {
    pub w: P,
    pub b: P,
}

param_fields!(DeconvParams, w, b);

/// `[h, w, c_in] -> [h, w, c_out]` pointwise convolution.
pub fn conv1x1<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Var {
    let s = tape.value(x).shape().to_vec();
    let (h, wd, c) = (s[0], s[1], s[2]);
    let flat = tape.reshape(x, vec![h * wd, c]);
    let y = tape.matmul(flat, w);
    let y = tape.add_row(y, b);
    let c_out = tape.value(y).cols();
    tape.reshape(y, vec![h, wd, c_out])
}

/// `[h, w, c_in] -> [h, w, c_out]` 3x3 convolution with zero padding.
/// Weight layout: `[9 * c_in, c_out]`, taps raster-ordered.
pub fn conv3x3<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Var {
    let s = tape.value(x).shape().to_vec();
    let (h, wd, c) = (s[0], s[1], s[2]);
    let mut idx = Vec::with_capacity(h * wd * 9 * c);
    for i in 0..h as isize {
        for j in 0..wd as isize {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (y, x_) = (i + dy, j + dx);
                    for ch in 0..c as isize {
                        if y < 0 || y >= h as isize || x_ < 0 || x_ >= wd as isize {
                            idx.push(-1);
                        } else {
                            idx.push((y * wd as isize + x_) * c as isize + ch);
                        }
                    }
                }
            }
        }
    }
    let cols = tape.gather_flat(x, &idx, vec![h * wd, 9 * c]);
    let y = tape.matmul(cols, w);
    let y = tape.add_row(y, b);
    let c_out = tape.value(y).cols();
    tape.reshape(y, vec![h, wd, c_out])
}

/// `[h, w, c_in] -> [2h, 2w, c_out]` 2x2 stride-2 transposed convolution.
pub fn deconv2x2<T: Real>(tape: &mut Tape<T>, x: Var, p: &DeconvParams<Var>) -> Var {
    let s = tape.value(x).shape().to_vec();
    let (h, wd, c) = (s[0], s[1], s[2]);
    let c_out = tape.value(p.w).cols() / 4;
    let flat = tape.reshape(x, vec![h * wd, c]);
    let t = tape.matmul(flat, p.w); // [h*w, 4*c_out]
    // Interleave the four per-pixel outputs into the upsampled grid.
    let (oh, ow) = (2 * h, 2 * wd);
    let mut idx = Vec::with_capacity(oh * ow * c_out);
    for oy in 0..oh {
        for ox in 0..ow {
            let (i, dy) = (oy / 2, oy % 2);
            let (j, dx) = (ox / 2, ox % 2);
            let src_row = i * wd + j;
            let tap = dy * 2 + dx;
            for ch in 0..c_out {
                idx.push((src_row * 4 * c_out + tap * c_out + ch) as isize);
            }
        }
    }
    let shuffled = tape.gather_flat(t, &idx, vec![oh * ow, c_out]);
    let y = tape.add_row(shuffled, p.b);
    tape.reshape(y, vec![oh, ow, c_out])
}

/// Per-position layer norm with affine over the channel axis.
pub fn channel_layer_norm<T: Real>(tape: &mut Tape<T>, x: Var, gain: Var, bias: Var) -> Var {
    let s = tape.value(x).shape().to_vec();
    let (h, w, c) = (s[0], s[1], s[2]);
    let flat = tape.reshape(x, vec![h * w, c]);
    let ln = tape.layer_norm_rows(flat, T::from_f64(1e-6));
    let ln = tape.mul_row(ln, gain);
    let ln = tape.add_row(ln, bias);
    tape.reshape(ln, vec![h, w, c])
}

pub fn gelu_grid<T: Real>(tape: &mut Tape<T>, x: Var) -> Var {
    tape.gelu(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::Tensor;

    #[test]
    fn conv1x1_is_per_pixel_linear() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(Tensor::new(vec![2, 1], vec![10.0, 1.0]));
        let b = tape.constant(Tensor::new(vec![1], vec![0.5]));
        let y = conv1x1(&mut tape, x, w, b);
        assert_eq!(tape.value(y).data(), &[12.5, 34.5]);
    }

    #[test]
    fn conv3x3_border_uses_zero_padding() {
        // Single channel, kernel that picks the top-left tap only.
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]));
        let mut w = Tensor::zeros(vec![9, 1]);
        w.data_mut()[0] = 1.0; // tap (-1, -1)
        let wv = tape.constant(w);
        let b = tape.constant(Tensor::zeros(vec![1]));
        let y = conv3x3(&mut tape, x, wv, b);
        // Output (i, j) = input (i-1, j-1) with zero at the border.
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn deconv_doubles_spatial_size() {
        let mut r = rng::stream(0, "conv-test");
        let x_t = rng::normal_tensor::<f64>(&mut r, vec![3, 3, 4], 1.0);
        let p_t = DeconvParams {
            w: rng::normal_tensor::<f64>(&mut r, vec![4, 8], 1.0),
            b: Tensor::zeros(vec![2]),
        };
        let mut tape = Tape::new();
        let x = tape.constant(x_t);
        let p = p_t.map(&mut |t| tape.constant(t.clone()));
        let y = deconv2x2(&mut tape, x, &p);
        assert_eq!(tape.value(y).shape(), &[6, 6, 2]);
    }
}
