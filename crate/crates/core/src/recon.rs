//! Filtered backprojection and the SIRT / CGLS iterative solvers.

use std::io::Write;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{invalid, Result};
use crate::image::Image;
use crate::tomo::{Projector, Sinogram, Stage};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    Fbp,
    Sirt,
    Cgls,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Filter {
    RamLak,
    Hann,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReconConfig {
    pub algorithm: Algorithm,
    pub iterations: usize,
    pub relaxation: f64,
    pub filter: Filter,
    pub nonneg_clamp: bool,
}

impl ReconConfig {
    pub fn fbp() -> Self {
        ReconConfig {
            algorithm: Algorithm::Fbp,
            iterations: 0,
            relaxation: 1.0,
            filter: Filter::RamLak,
            nonneg_clamp: false,
        }
    }

    pub fn sirt(iterations: usize) -> Self {
        ReconConfig {
            algorithm: Algorithm::Sirt,
            iterations,
            nonneg_clamp: true,
            ..ReconConfig::fbp()
        }
    }

    pub fn cgls(iterations: usize) -> Self {
        ReconConfig {
            algorithm: Algorithm::Cgls,
            iterations,
            nonneg_clamp: true,
            ..ReconConfig::fbp()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.relaxation > 0.0 && self.relaxation <= 2.0) {
            return Err(invalid(format!("relaxation {} outside (0, 2]", self.relaxation)));
        }
        Ok(())
    }
}

/// One row of a solver's convergence log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub residual_norm: f64,
    pub rmse_vs_truth: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub image: Image,
    /// Entry `k` describes the `k`-th iterate, starting from the zero image.
    pub log: Vec<IterationRecord>,
    /// Set when CGLS stopped early on a vanishing search direction.
    pub converged: bool,
}

/// Dispatch on `cfg.algorithm`; `truth` only feeds the convergence log.
pub fn reconstruct(sino: &Sinogram, cfg: &ReconConfig, truth: Option<&Image>) -> Result<Reconstruction> {
    match cfg.algorithm {
        Algorithm::Fbp => Ok(Reconstruction {
            image: fbp(sino, cfg)?,
            log: Vec::new(),
            converged: true,
        }),
        Algorithm::Sirt => sirt_tracked(sino, cfg, truth),
        Algorithm::Cgls => cgls_tracked(sino, cfg, truth),
    }
}

/// Spatial Ram-Lak kernel sampled on the detector grid.
fn ramlak_tap(n: isize, spacing: f64) -> f64 {
    if n == 0 {
        1.0 / (4.0 * spacing * spacing)
    } else if n % 2 == 0 {
        0.0
    } else {
        -1.0 / (std::f64::consts::PI.powi(2) * (n * n) as f64 * spacing * spacing)
    }
}

/// Frequency response of the (optionally Hann-apodized) ramp filter on a
/// zero-padded grid of length `len`, including the detector spacing factor.
fn filter_response(len: usize, n_det: usize, spacing: f64, filter: Filter) -> Vec<Complex<f64>> {
    let mut h = vec![Complex::new(0.0, 0.0); len];
    let reach = (n_det as isize - 1).min(len as isize / 2 - 1);
    for n in -reach..=reach {
        let idx = n.rem_euclid(len as isize) as usize;
        h[idx] = Complex::new(ramlak_tap(n, spacing) * spacing, 0.0);
    }
    FftPlanner::new().plan_fft_forward(len).process(&mut h);
    if filter == Filter::Hann {
        for (k, v) in h.iter_mut().enumerate() {
            let f = if k <= len / 2 { k } else { len - k } as f64 / (len as f64 / 2.0);
            *v *= 0.5 * (1.0 + (std::f64::consts::PI * f).cos());
        }
    }
    h
}

/// Ramp-filter every view (zero-padded FFT convolution).
pub fn filter_views(sino: &Sinogram, filter: Filter) -> Vec<f64> {
    let g = &sino.geometry;
    let nd = g.n_detectors;
    let len = (2 * nd).next_power_of_two();
    let response = filter_response(len, nd, g.detector_spacing, filter);
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    let mut out = vec![0.0; g.len()];
    out.par_chunks_mut(nd).enumerate().for_each(|(v, row)| {
        let mut buf = vec![Complex::new(0.0, 0.0); len];
        for (b, &p) in buf.iter_mut().zip(sino.view(v)) {
            *b = Complex::new(f64::from(p), 0.0);
        }
        fwd.process(&mut buf);
        for (b, h) in buf.iter_mut().zip(&response) {
            *b *= h;
        }
        inv.process(&mut buf);
        for (o, b) in row.iter_mut().zip(&buf) {
            *o = b.re / len as f64;
        }
    });
    out
}

/// Filtered backprojection with linear detector interpolation, scaled by
/// `pi / n_views`.
pub fn fbp(sino: &Sinogram, cfg: &ReconConfig) -> Result<Image> {
    sino.expect_stage(Stage::Attenuation)?;
    let g = &sino.geometry;
    if g.n_views() < 2 {
        return Err(invalid("filtered backprojection needs at least two views"));
    }
    let q = filter_views(sino, cfg.filter);
    let n = g.image_size;
    let nd = g.n_detectors;
    let half = (n as f64 - 1.0) / 2.0;
    let det_mid = (nd as f64 - 1.0) / 2.0;
    let trig: Vec<(f64, f64)> = g.angles.iter().map(|a| a.sin_cos()).collect();
    let scale = std::f64::consts::PI / g.n_views() as f64;
    let mut data = vec![0.0f32; n * n];
    data.par_chunks_mut(n).enumerate().for_each(|(r, row)| {
        let y = half - r as f64;
        for (c, out) in row.iter_mut().enumerate() {
            let x = c as f64 - half;
            let mut acc = 0.0;
            for (v, &(sin, cos)) in trig.iter().enumerate() {
                let t = (x * cos + y * sin) / g.detector_spacing + det_mid;
                let i0 = t.floor();
                let f = t - i0;
                let i0 = i0 as isize;
                let view = &q[v * nd..(v + 1) * nd];
                if i0 >= 0 && (i0 as usize) < nd {
                    acc += (1.0 - f) * view[i0 as usize];
                }
                if i0 + 1 >= 0 && ((i0 + 1) as usize) < nd {
                    acc += f * view[(i0 + 1) as usize];
                }
            }
            let mut v = acc * scale;
            if cfg.nonneg_clamp {
                v = v.max(0.0);
            }
            *out = v as f32;
        }
    });
    Image::new(n, n, data)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rmse_against(x: &[f64], truth: Option<&Image>) -> Option<f64> {
    truth.map(|t| {
        let sq: f64 = x.iter().zip(t.data()).map(|(a, &b)| (a - f64::from(b)).powi(2)).sum();
        (sq / x.len() as f64).sqrt()
    })
}

fn to_image(x: &[f64], n: usize) -> Result<Image> {
    Image::new(n, n, x.iter().map(|&v| v as f32).collect())
}

fn check_truth(sino: &Sinogram, truth: Option<&Image>) -> Result<()> {
    if let Some(t) = truth {
        let n = sino.geometry.image_size;
        if t.width() != n || t.height() != n {
            return Err(crate::error::dims("truth image does not match geometry"));
        }
    }
    Ok(())
}

/// Inverse of positive entries, zero elsewhere.
fn inverse_weights(sums: Vec<f64>) -> Vec<f64> {
    sums.into_iter().map(|s| if s > 0.0 { 1.0 / s } else { 0.0 }).collect()
}

pub fn sirt(sino: &Sinogram, cfg: &ReconConfig) -> Result<Image> {
    Ok(sirt_tracked(sino, cfg, None)?.image)
}

/// SIRT: `x += relaxation * C P^T R (b - P x)` with `R`, `C` the inverse
/// row and column sums of the projector.
pub fn sirt_tracked(sino: &Sinogram, cfg: &ReconConfig, truth: Option<&Image>) -> Result<Reconstruction> {
    sino.expect_stage(Stage::Attenuation)?;
    cfg.validate()?;
    check_truth(sino, truth)?;
    let g = &sino.geometry;
    let n = g.image_size;
    let proj = Projector::new(g)?;
    let b = sino.to_f64();
    let row_w = inverse_weights(proj.forward(&vec![1.0; n * n]));
    let col_w = inverse_weights(proj.adjoint(&vec![1.0; g.len()]));
    let mut x = vec![0.0; n * n];
    let mut residual: Vec<f64> = b.clone();
    let mut log = vec![IterationRecord {
        iteration: 0,
        residual_norm: norm(&residual),
        rmse_vs_truth: rmse_against(&x, truth),
    }];
    for k in 1..=cfg.iterations {
        let weighted: Vec<f64> = residual.iter().zip(&row_w).map(|(r, w)| r * w).collect();
        let update = proj.adjoint(&weighted);
        for ((xi, u), c) in x.iter_mut().zip(&update).zip(&col_w) {
            *xi += cfg.relaxation * c * u;
            if cfg.nonneg_clamp && *xi < 0.0 {
                *xi = 0.0;
            }
        }
        let px = proj.forward(&x);
        for ((r, bi), pi) in residual.iter_mut().zip(&b).zip(&px) {
            *r = bi - pi;
        }
        log.push(IterationRecord {
            iteration: k,
            residual_norm: norm(&residual),
            rmse_vs_truth: rmse_against(&x, truth),
        });
    }
    Ok(Reconstruction {
        image: to_image(&x, n)?,
        log,
        converged: false,
    })
}

pub fn cgls(sino: &Sinogram, cfg: &ReconConfig) -> Result<Image> {
    Ok(cgls_tracked(sino, cfg, None)?.image)
}

/// Conjugate gradient on the normal equations of `min ||P x - b||`.
/// The non-negativity clamp, when enabled, is applied to the final
/// iterate only; clamping inside the recurrence would break conjugacy.
pub fn cgls_tracked(sino: &Sinogram, cfg: &ReconConfig, truth: Option<&Image>) -> Result<Reconstruction> {
    sino.expect_stage(Stage::Attenuation)?;
    cfg.validate()?;
    check_truth(sino, truth)?;
    let g = &sino.geometry;
    let n = g.image_size;
    let proj = Projector::new(g)?;
    let mut r = sino.to_f64();
    let mut x = vec![0.0; n * n];
    let mut s = proj.adjoint(&r);
    let mut p = s.clone();
    let mut gamma: f64 = s.iter().map(|v| v * v).sum();
    let mut log = vec![IterationRecord {
        iteration: 0,
        residual_norm: norm(&r),
        rmse_vs_truth: rmse_against(&x, truth),
    }];
    let mut converged = false;
    for k in 1..=cfg.iterations {
        let q = proj.forward(&p);
        let qq: f64 = q.iter().map(|v| v * v).sum();
        if qq <= f64::MIN_POSITIVE || gamma <= f64::MIN_POSITIVE {
            converged = true;
            break;
        }
        let alpha = gamma / qq;
        for (xi, pi) in x.iter_mut().zip(&p) {
            *xi += alpha * pi;
        }
        for (ri, qi) in r.iter_mut().zip(&q) {
            *ri -= alpha * qi;
        }
        s = proj.adjoint(&r);
        let gamma_next: f64 = s.iter().map(|v| v * v).sum();
        let beta = gamma_next / gamma;
        for (pi, si) in p.iter_mut().zip(&s) {
            *pi = si + beta * *pi;
        }
        gamma = gamma_next;
        log.push(IterationRecord {
            iteration: k,
            residual_norm: norm(&r),
            rmse_vs_truth: rmse_against(&x, truth),
        });
    }
    if cfg.nonneg_clamp {
        for xi in &mut x {
            *xi = xi.max(0.0);
        }
    }
    Ok(Reconstruction {
        image: to_image(&x, n)?,
        log,
        converged,
    })
}

/// Residual log as CSV: `iteration,residual_norm,rmse_vs_truth`. The last
/// column is empty when no truth was supplied.
pub fn write_residual_csv(log: &[IterationRecord], w: &mut impl Write) -> Result<()> {
    writeln!(w, "iteration,residual_norm,rmse_vs_truth")?;
    for rec in log {
        match rec.rmse_vs_truth {
            Some(e) => writeln!(w, "{},{:e},{:e}", rec.iteration, rec.residual_norm, e)?,
            None => writeln!(w, "{},{:e},", rec.iteration, rec.residual_norm)?,
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::disk_phantom;
    use crate::tomo::{as_attenuation, forward_project, Geometry};

    fn noiseless(img: &Image, geo: &Geometry) -> Sinogram {
        as_attenuation(&forward_project(img, geo).unwrap()).unwrap()
    }

    fn rmse(a: &Image, b: &Image) -> f64 {
        let sq: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
            .sum();
        (sq / a.len() as f64).sqrt()
    }

    #[test]
    fn zero_sinogram_gives_zero_image() {
        let g = Geometry::covering(24, 12).unwrap();
        let s = Sinogram::new(g.clone(), Stage::Attenuation, vec![0.0; g.len()]).unwrap();
        assert!(fbp(&s, &ReconConfig::fbp()).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(sirt(&s, &ReconConfig::sirt(3))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let c = cgls_tracked(&s, &ReconConfig::cgls(3), None).unwrap();
        assert!(c.converged);
        assert!(c.image.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_iterations_return_initial_guess() {
        let g = Geometry::covering(16, 8).unwrap();
        let s = noiseless(&disk_phantom(16, 5.0, 1.0), &g);
        assert!(sirt(&s, &ReconConfig::sirt(0))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(cgls(&s, &ReconConfig::cgls(0))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn input_checks() {
        let g = Geometry::covering(16, 8).unwrap();
        let raw = forward_project(&disk_phantom(16, 5.0, 1.0), &g).unwrap();
        assert!(fbp(&raw, &ReconConfig::fbp()).is_err());
        let one = Geometry::covering(16, 1).unwrap();
        let s = noiseless(&Image::zeros(16, 16), &one);
        assert!(fbp(&s, &ReconConfig::fbp()).is_err());
        let bad = ReconConfig {
            relaxation: 2.5,
            ..ReconConfig::sirt(1)
        };
        assert!(sirt(&noiseless(&Image::zeros(16, 16), &g), &bad).is_err());
    }

    #[test]
    fn fbp_recovers_disk() {
        let g = Geometry::desk_default();
        let truth = disk_phantom(128, 40.0, 1.0);
        let img = fbp(&noiseless(&truth, &g), &ReconConfig::fbp()).unwrap();
        let e = rmse(&img, &truth);
        assert!(e < 0.05, "FBP rmse {e}");
        let hann = ReconConfig {
            filter: Filter::Hann,
            ..ReconConfig::fbp()
        };
        assert!(rmse(&fbp(&noiseless(&truth, &g), &hann).unwrap(), &truth) < 0.08);
    }

    #[test]
    fn sirt_residual_non_increasing() {
        let g = Geometry::covering(32, 30).unwrap();
        let s = noiseless(&disk_phantom(32, 10.0, 1.0), &g);
        let rec = sirt_tracked(&s, &ReconConfig::sirt(50), None).unwrap();
        for w in rec.log.windows(2) {
            assert!(w[1].residual_norm <= w[0].residual_norm * (1.0 + 1e-12));
        }
    }

    #[test]
    fn cgls_residual_decreases() {
        let g = Geometry::covering(32, 30).unwrap();
        let s = noiseless(&disk_phantom(32, 10.0, 1.0), &g);
        let rec = cgls_tracked(&s, &ReconConfig::cgls(30), None).unwrap();
        for w in rec.log.windows(2) {
            assert!(w[1].residual_norm < w[0].residual_norm);
        }
    }

    #[test]
    fn residual_csv_layout() {
        let log = [
            IterationRecord {
                iteration: 0,
                residual_norm: 2.0,
                rmse_vs_truth: None,
            },
            IterationRecord {
                iteration: 1,
                residual_norm: 1.0,
                rmse_vs_truth: Some(0.5),
            },
        ];
        let mut buf = Vec::new();
        write_residual_csv(&log, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "iteration,residual_norm,rmse_vs_truth\n0,2e0,\n1,1e0,5e-1\n");
    }
}
