//! Layer kernels with their backward passes.
//!
//! Convolutions are lowered to GEMM via im2col. Weight layouts:
//! - conv: `[out_c][in_c][k][k]`
//! - transposed conv (2x2, stride 2): `[in_c][out_c][2][2]`

use crate::error::{dims, Result};
use crate::nn::tensor::Tensor;
use crate::real::Real;

fn check_channels(x_c: usize, in_c: usize, what: &str) -> Result<()> {
    if x_c != in_c {
        return Err(dims(format!("{what} expects {in_c} input channels, got {x_c}")));
    }
    Ok(())
}

/// Unfold `x` into a `(in_c * k * k) x (h * w)` matrix with zero padding `k / 2`.
fn im2col<T: Real>(x: &Tensor<T>, k: usize) -> Vec<T> {
    let (c_in, h, w) = x.shape();
    let hw = h * w;
    let pad = (k / 2) as isize;
    let mut col = vec![T::zero(); c_in * k * k * hw];
    for ci in 0..c_in {
        let src = &x.values[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s = sy as usize * w;
                    let d = y * w;
                    let sx0 = (x0 as isize + dx) as usize;
                    row[d + x0..d + x1].copy_from_slice(&src[s + sx0..s + sx0 + (x1 - x0)]);
                }
            }
        }
    }
    col
}

/// Fold a column-matrix gradient back onto the input grid (adjoint of im2col).
fn col2im<T: Real>(col: &[T], c_in: usize, h: usize, w: usize, k: usize) -> Tensor<T> {
    let hw = h * w;
    let pad = (k / 2) as isize;
    let mut out = Tensor::zeros(c_in, h, w);
    for ci in 0..c_in {
        let dst = &mut out.values[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * hw..][..hw];
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s = sy as usize * w;
                    let d = y * w;
                    let sx0 = (x0 as isize + dx) as usize;
                    for (o, &g) in dst[s + sx0..s + sx0 + (x1 - x0)].iter_mut().zip(&row[d + x0..d + x1]) {
                        *o += g;
                    }
                }
            }
        }
    }
    out
}

/// Same-size convolution (cross-correlation) with zero padding. Returns the
/// output and the im2col matrix needed by [`conv2d_backward`].
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    bias: &[T],
    k: usize,
    out_c: usize,
) -> Result<(Tensor<T>, Vec<T>)> {
    let in_c = weight.len() / (out_c * k * k);
    check_channels(x.channels, in_c, "convolution")?;
    let hw = x.plane();
    let kk = in_c * k * k;
    let col = im2col(x, k);
    let mut out = Tensor::zeros(out_c, x.height, x.width);
    for (co, plane) in out.values.chunks_exact_mut(hw).enumerate() {
        plane.fill(bias[co]);
    }
    T::gemm(
        out_c,
        kk,
        hw,
        T::one(),
        weight,
        kk as isize,
        1,
        &col,
        hw as isize,
        1,
        T::one(),
        &mut out.values,
        hw as isize,
        1,
    );
    Ok((out, col))
}

pub struct ParamGrads<T> {
    pub input: Tensor<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Real>(
    col: &[T],
    in_shape: (usize, usize, usize),
    weight: &[T],
    k: usize,
    out_c: usize,
    grad_out: &Tensor<T>,
) -> ParamGrads<T> {
    let (in_c, h, w) = in_shape;
    let hw = h * w;
    let kk = in_c * k * k;
    let mut g_w = vec![T::zero(); out_c * kk];
    // dW = dY col^T
    T::gemm(
        out_c,
        hw,
        kk,
        T::one(),
        &grad_out.values,
        hw as isize,
        1,
        col,
        1,
        hw as isize,
        T::zero(),
        &mut g_w,
        kk as isize,
        1,
    );
    let g_b = grad_out
        .values
        .chunks_exact(hw)
        .map(|p| p.iter().copied().sum())
        .collect();
    // dcol = W^T dY
    let mut g_col = vec![T::zero(); kk * hw];
    T::gemm(
        kk,
        out_c,
        hw,
        T::one(),
        weight,
        1,
        kk as isize,
        &grad_out.values,
        hw as isize,
        1,
        T::zero(),
        &mut g_col,
        hw as isize,
        1,
    );
    ParamGrads {
        input: col2im(&g_col, in_c, h, w, k),
        weight: g_w,
        bias: g_b,
    }
}

/// 2x2 stride-2 transposed convolution; output is exactly twice the size.
pub fn tconv2d_forward<T: Real>(x: &Tensor<T>, weight: &[T], bias: &[T], out_c: usize) -> Result<Tensor<T>> {
    let in_c = weight.len() / (out_c * 4);
    check_channels(x.channels, in_c, "transposed convolution")?;
    let (h, w) = (x.height, x.width);
    let hw = h * w;
    let m = out_c * 4;
    let mut y = vec![T::zero(); m * hw];
    // Y' = Wt^T X, with Wt stored in_c x (out_c * 4).
    T::gemm(
        m,
        in_c,
        hw,
        T::one(),
        weight,
        1,
        m as isize,
        &x.values,
        hw as isize,
        1,
        T::zero(),
        &mut y,
        hw as isize,
        1,
    );
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(out_c, oh, ow);
    for co in 0..out_c {
        for a in 0..2 {
            for b in 0..2 {
                let src = &y[(co * 4 + a * 2 + b) * hw..][..hw];
                for i in 0..h {
                    let row = &mut out.values[(co * oh + 2 * i + a) * ow..][..ow];
                    for j in 0..w {
                        row[2 * j + b] = src[i * w + j] + bias[co];
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn tconv2d_backward<T: Real>(x: &Tensor<T>, weight: &[T], out_c: usize, grad_out: &Tensor<T>) -> ParamGrads<T> {
    let in_c = x.channels;
    let (h, w) = (x.height, x.width);
    let hw = h * w;
    let m = out_c * 4;
    let (oh, ow) = (2 * h, 2 * w);
    let mut gy = vec![T::zero(); m * hw];
    let mut g_b = vec![T::zero(); out_c];
    for co in 0..out_c {
        for a in 0..2 {
            for b in 0..2 {
                let dst = &mut gy[(co * 4 + a * 2 + b) * hw..][..hw];
                for i in 0..h {
                    let row = &grad_out.values[(co * oh + 2 * i + a) * ow..][..ow];
                    for j in 0..w {
                        dst[i * w + j] = row[2 * j + b];
                    }
                }
            }
        }
        g_b[co] = grad_out.values[co * oh * ow..(co + 1) * oh * ow].iter().copied().sum();
    }
    let mut g_w = vec![T::zero(); in_c * m];
    // dWt = X dY'^T
    T::gemm(
        in_c,
        hw,
        m,
        T::one(),
        &x.values,
        hw as isize,
        1,
        &gy,
        1,
        hw as isize,
        T::zero(),
        &mut g_w,
        m as isize,
        1,
    );
    let mut g_x = Tensor::zeros(in_c, h, w);
    // dX = Wt dY'
    T::gemm(
        in_c,
        m,
        hw,
        T::one(),
        weight,
        m as isize,
        1,
        &gy,
        hw as isize,
        1,
        T::zero(),
        &mut g_x.values,
        hw as isize,
        1,
    );
    ParamGrads {
        input: g_x,
        weight: g_w,
        bias: g_b,
    }
}

/// 2x2 stride-2 max pooling. Returns the output plus, per output element,
/// the flat input index of the selected maximum (first in row-major order
/// on ties).
pub fn maxpool2_forward<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (c, h, w) = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(dims(format!("max pooling needs even dimensions, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(c, oh, ow);
    let mut arg = vec![0usize; c * oh * ow];
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let base = (ch * h + 2 * i) * w + 2 * j;
                let mut best = base;
                for idx in [base + 1, base + w, base + w + 1] {
                    if x.values[idx] > x.values[best] {
                        best = idx;
                    }
                }
                let o = (ch * oh + i) * ow + j;
                out.values[o] = x.values[best];
                arg[o] = best;
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool2_backward<T: Real>(
    in_shape: (usize, usize, usize),
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let (c, h, w) = in_shape;
    let mut g = Tensor::zeros(c, h, w);
    for (&idx, &go) in argmax.iter().zip(&grad_out.values) {
        g.values[idx] += go;
    }
    g
}

pub fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    Tensor {
        values: x.values.iter().map(|&v| v.max(T::zero())).collect(),
        ..*x
    }
}

/// Uses the forward output: the gradient passes where the output is positive.
pub fn relu_backward<T: Real>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    Tensor {
        values: output
            .values
            .iter()
            .zip(&grad_out.values)
            .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
            .collect(),
        ..*output
    }
}

/// Stack `b`'s channels after `a`'s.
pub fn concat<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.height != b.height || a.width != b.width {
        return Err(dims(format!(
            "cannot concatenate {}x{} with {}x{} feature maps",
            a.height, a.width, b.height, b.width
        )));
    }
    let mut values = Vec::with_capacity(a.values.len() + b.values.len());
    values.extend_from_slice(&a.values);
    values.extend_from_slice(&b.values);
    Ok(Tensor {
        channels: a.channels + b.channels,
        height: a.height,
        width: a.width,
        values,
    })
}

/// Split a concatenated gradient into the parts for `a` (first `a_channels`)
/// and `b`.
pub fn split<T: Real>(g: &Tensor<T>, a_channels: usize) -> (Tensor<T>, Tensor<T>) {
    let cut = a_channels * g.plane();
    (
        Tensor {
            channels: a_channels,
            values: g.values[..cut].to_vec(),
            ..*g
        },
        Tensor {
            channels: g.channels - a_channels,
            values: g.values[cut..].to_vec(),
            ..*g
        },
    )
}
