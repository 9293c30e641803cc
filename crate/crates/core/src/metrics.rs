//! Image-quality measures: MSE, PSNR and windowed SSIM.
//!
//! The SSIM kernels are generic over [`Real`] and expose the analytic
//! gradient of the mean SSIM with respect to the first argument, which is
//! what the SSIM training loss is built on.

use crate::error::{dims, invalid, Result};
use crate::image::Image;
use crate::real::Real;

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_dims(b)?;
    let sq: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum();
    Ok(sq / a.len() as f64)
}

pub fn rmse(a: &Image, b: &Image) -> Result<f64> {
    mse(a, b).map(f64::sqrt)
}

/// `10 log10(peak^2 / mse)`; identical images give `+inf`.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(invalid("PSNR peak must be positive"));
    }
    let e = mse(a, b)?;
    if e == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (peak * peak / e).log10())
    }
}

/// `"inf"` for the identical-image sentinel, plain decimal otherwise.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Window {
    Gaussian { size: usize, sigma: f64 },
    Uniform { size: usize },
}

impl Window {
    pub fn size(&self) -> usize {
        match *self {
            Window::Gaussian { size, .. } | Window::Uniform { size } => size,
        }
    }

    /// Normalized 1-D profile; the 2-D window is its outer product.
    pub fn profile(&self) -> Vec<f64> {
        let size = self.size();
        let raw: Vec<f64> = match *self {
            Window::Gaussian { sigma, .. } => {
                let mid = (size / 2) as f64;
                (0..size)
                    .map(|i| (-(i as f64 - mid).powi(2) / (2.0 * sigma * sigma)).exp())
                    .collect()
            }
            Window::Uniform { .. } => vec![1.0; size],
        };
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: Window,
    pub c1: f64,
    pub c2: f64,
    pub dynamic_range: f64,
}

impl SsimParams {
    /// `c1 = (0.01 L)^2`, `c2 = (0.03 L)^2`.
    pub fn new(window: Window, dynamic_range: f64) -> Self {
        SsimParams {
            window,
            c1: (0.01 * dynamic_range).powi(2),
            c2: (0.03 * dynamic_range).powi(2),
            dynamic_range,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let size = self.window.size();
        if size == 0 || size.is_multiple_of(2) {
            return Err(invalid(format!("SSIM window size {size} must be odd")));
        }
        if let Window::Gaussian { sigma, .. } = self.window {
            if !(sigma > 0.0) {
                return Err(invalid("Gaussian window sigma must be positive"));
            }
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(invalid("SSIM constants must be positive"));
        }
        Ok(())
    }
}

impl Default for SsimParams {
    /// Gaussian 11x11 window, sigma 1.5, unit dynamic range.
    fn default() -> Self {
        SsimParams::new(Window::Gaussian { size: 11, sigma: 1.5 }, 1.0)
    }
}

/// Symmetric (edge-repeating) reflection of `i` into `0..n`.
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

/// Separable window filter with symmetric padding, plus its adjoint.
#[derive(Clone, Debug)]
pub struct WindowFilter<T> {
    weights: Vec<T>,
    width: usize,
    height: usize,
}

impl<T: Real> WindowFilter<T> {
    pub fn new(window: &Window, width: usize, height: usize) -> Self {
        WindowFilter {
            weights: window.profile().into_iter().map(T::of).collect(),
            width,
            height,
        }
    }

    fn pass(&self, src: &[T], dst: &mut [T], horizontal: bool, adjoint: bool) {
        let (w, h) = (self.width, self.height);
        let half = (self.weights.len() / 2) as isize;
        dst.iter_mut().for_each(|v| *v = T::zero());
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                for (k, &wt) in self.weights.iter().enumerate() {
                    let off = k as isize - half;
                    let j = if horizontal {
                        r * w + reflect(c as isize + off, w)
                    } else {
                        reflect(r as isize + off, h) * w + c
                    };
                    if adjoint {
                        dst[j] += wt * src[i];
                    } else {
                        dst[i] += wt * src[j];
                    }
                }
            }
        }
    }

    /// Windowed weighted mean at every pixel.
    pub fn apply(&self, src: &[T]) -> Vec<T> {
        let mut tmp = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        self.pass(src, &mut tmp, true, false);
        self.pass(&tmp, &mut out, false, false);
        out
    }

    /// Transpose of [`WindowFilter::apply`].
    pub fn apply_adjoint(&self, src: &[T]) -> Vec<T> {
        let mut tmp = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        self.pass(src, &mut tmp, false, true);
        self.pass(&tmp, &mut out, true, true);
        out
    }
}

struct LocalStats<T> {
    mu_x: Vec<T>,
    mu_y: Vec<T>,
    var_x: Vec<T>,
    var_y: Vec<T>,
    cov: Vec<T>,
}

fn local_stats<T: Real>(filter: &WindowFilter<T>, x: &[T], y: &[T]) -> LocalStats<T> {
    let sq = |a: &[T], b: &[T]| a.iter().zip(b).map(|(&p, &q)| p * q).collect::<Vec<T>>();
    let mu_x = filter.apply(x);
    let mu_y = filter.apply(y);
    let exx = filter.apply(&sq(x, x));
    let eyy = filter.apply(&sq(y, y));
    let exy = filter.apply(&sq(x, y));
    let n = x.len();
    let mut var_x = Vec::with_capacity(n);
    let mut var_y = Vec::with_capacity(n);
    let mut cov = Vec::with_capacity(n);
    for i in 0..n {
        var_x.push(exx[i] - mu_x[i] * mu_x[i]);
        var_y.push(eyy[i] - mu_y[i] * mu_y[i]);
        cov.push(exy[i] - mu_x[i] * mu_y[i]);
    }
    LocalStats {
        mu_x,
        mu_y,
        var_x,
        var_y,
        cov,
    }
}

fn check_buffers(x_len: usize, y_len: usize, width: usize, height: usize) -> Result<()> {
    if x_len != width * height || y_len != width * height {
        return Err(dims(format!(
            "SSIM inputs of {x_len} and {y_len} values for a {width}x{height} grid"
        )));
    }
    Ok(())
}

/// Per-pixel SSIM of two row-major buffers.
pub fn ssim_values<T: Real>(x: &[T], y: &[T], width: usize, height: usize, params: &SsimParams) -> Result<Vec<T>> {
    params.validate()?;
    check_buffers(x.len(), y.len(), width, height)?;
    let filter = WindowFilter::new(&params.window, width, height);
    let s = local_stats(&filter, x, y);
    let (c1, c2) = (T::of(params.c1), T::of(params.c2));
    let two = T::of(2.0);
    Ok((0..x.len())
        .map(|i| {
            let a1 = two * s.mu_x[i] * s.mu_y[i] + c1;
            let a2 = two * s.cov[i] + c2;
            let b1 = s.mu_x[i] * s.mu_x[i] + s.mu_y[i] * s.mu_y[i] + c1;
            let b2 = s.var_x[i] + s.var_y[i] + c2;
            (a1 * a2) / (b1 * b2)
        })
        .collect())
}

/// `1 - mean SSIM(x, y)` and its gradient with respect to `x`.
///
/// With `mu`, `E[x^2]` and `E[xy]` all linear window filters `A` of the
/// inputs, the chain rule gives
/// `dL/dx = -(1/N) (A^T a + 2 x (A^T b) + y (A^T c))`, where `a`, `b`, `c`
/// are the pointwise partials of SSIM with respect to `mu_x`, `E[x^2]` and
/// `E[xy]`.
pub fn ssim_loss_and_grad<T: Real>(
    x: &[T],
    y: &[T],
    width: usize,
    height: usize,
    params: &SsimParams,
) -> Result<(T, Vec<T>)> {
    params.validate()?;
    check_buffers(x.len(), y.len(), width, height)?;
    let filter = WindowFilter::new(&params.window, width, height);
    let s = local_stats(&filter, x, y);
    let (c1, c2) = (T::of(params.c1), T::of(params.c2));
    let two = T::of(2.0);
    let n = x.len();
    let mut d_mu = vec![T::zero(); n];
    let mut d_exx = vec![T::zero(); n];
    let mut d_exy = vec![T::zero(); n];
    let mut total = T::zero();
    for i in 0..n {
        let (mx, my) = (s.mu_x[i], s.mu_y[i]);
        let a1 = two * mx * my + c1;
        let a2 = two * s.cov[i] + c2;
        let b1 = mx * mx + my * my + c1;
        let b2 = s.var_x[i] + s.var_y[i] + c2;
        let den = b1 * b2;
        let ssim = a1 * a2 / den;
        total += ssim;
        d_exx[i] = -ssim / b2;
        d_exy[i] = two * a1 / den;
        d_mu[i] = two * my * (a2 - a1) / den - two * mx * ssim * (T::one() / b1 - T::one() / b2);
    }
    let inv_n = T::one() / T::of(n as f64);
    let g_mu = filter.apply_adjoint(&d_mu);
    let g_exx = filter.apply_adjoint(&d_exx);
    let g_exy = filter.apply_adjoint(&d_exy);
    let grad = (0..n)
        .map(|j| -inv_n * (g_mu[j] + two * x[j] * g_exx[j] + y[j] * g_exy[j]))
        .collect();
    Ok((T::one() - total * inv_n, grad))
}

/// Per-pixel SSIM over the full image extent.
#[derive(Clone, Debug, PartialEq)]
pub struct SsimMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl SsimMap {
    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

fn as_f64(img: &Image) -> Vec<f64> {
    img.data().iter().map(|&v| f64::from(v)).collect()
}

pub fn ssim_map(t: &Image, r: &Image, params: &SsimParams) -> Result<SsimMap> {
    t.check_same_dims(r)?;
    let data = ssim_values(&as_f64(t), &as_f64(r), t.width(), t.height(), params)?;
    Ok(SsimMap {
        width: t.width(),
        height: t.height(),
        data,
    })
}

/// Mean of the SSIM map.
pub fn mssim(t: &Image, r: &Image, params: &SsimParams) -> Result<f64> {
    Ok(ssim_map(t, r, params)?.mean())
}

/// Standard deviation of `recon - truth` over pixels whose truth
/// neighbourhood (radius `radius`) varies by at most `tolerance`.
/// Returns `None` when no pixel qualifies.
pub fn flat_region_noise_std(recon: &Image, truth: &Image, radius: usize, tolerance: f32) -> Result<Option<f64>> {
    recon.check_same_dims(truth)?;
    let (w, h) = (truth.width(), truth.height());
    let mut diffs = Vec::new();
    for r in radius..h.saturating_sub(radius) {
        for c in radius..w.saturating_sub(radius) {
            let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
            for rr in r - radius..=r + radius {
                for cc in c - radius..=c + radius {
                    let v = truth.get(rr, cc);
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            if hi - lo <= tolerance {
                diffs.push(f64::from(recon.get(r, c)) - f64::from(truth.get(r, c)));
            }
        }
    }
    if diffs.len() < 2 {
        return Ok(None);
    }
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64;
    Ok(Some(var.sqrt()))
}
