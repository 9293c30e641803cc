//! Parallel-beam acquisition: projection, exposure-dependent photon noise
//! and the log transform back to line integrals.

use std::io::{Read, Write};

use rayon::prelude::*;

use crate::error::{dims, invalid, Error, Result};
use crate::image::{read_array, read_f32s, write_f32s, Image};
use crate::seed;

/// Parallel-beam scan geometry. Pixel `(r, c)` of an `N`x`N` image sits at
/// `x = c - (N-1)/2`, `y = (N-1)/2 - r`; detector `d` at
/// `s = (d - (D-1)/2) * spacing`; a view at angle `theta` integrates along
/// the lines `x cos(theta) + y sin(theta) = s`.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    pub image_size: usize,
    pub angles: Vec<f64>,
    pub n_detectors: usize,
    pub detector_spacing: f64,
}

impl Geometry {
    /// `n_views` angles evenly spaced over `[0, pi)`.
    pub fn parallel(image_size: usize, n_views: usize, n_detectors: usize, detector_spacing: f64) -> Result<Self> {
        let angles = (0..n_views)
            .map(|i| std::f64::consts::PI * i as f64 / n_views as f64)
            .collect();
        let geo = Geometry {
            image_size,
            angles,
            n_detectors,
            detector_spacing,
        };
        geo.validate()?;
        Ok(geo)
    }

    /// 180 views over a 192-bin detector for a 128-pixel image.
    pub fn desk_default() -> Self {
        Geometry::parallel(128, 180, 192, 1.0).expect("default geometry is valid")
    }

    /// Smallest full-coverage detector for an image, with unit spacing.
    pub fn covering(image_size: usize, n_views: usize) -> Result<Self> {
        let n_det = ((image_size as f64) * std::f64::consts::SQRT_2).ceil() as usize + 2;
        Geometry::parallel(image_size, n_views, n_det, 1.0)
    }

    pub fn n_views(&self) -> usize {
        self.angles.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(invalid("image size must be positive"));
        }
        if self.angles.is_empty() {
            return Err(invalid("geometry needs at least one view"));
        }
        if !(self.detector_spacing > 0.0) {
            return Err(invalid("detector spacing must be positive"));
        }
        if self.angles.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("view angles must be strictly increasing"));
        }
        let diag = self.image_size as f64 * std::f64::consts::SQRT_2;
        if (self.n_detectors as f64) * self.detector_spacing < diag {
            return Err(invalid(format!(
                "{} detectors x {} do not cover the image diagonal {diag:.1}",
                self.n_detectors, self.detector_spacing
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn detector_offset(&self, d: usize) -> f64 {
        (d as f64 - (self.n_detectors as f64 - 1.0) / 2.0) * self.detector_spacing
    }

    pub fn len(&self) -> usize {
        self.n_views() * self.n_detectors
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    LineIntegral,
    PhotonCounts,
    Attenuation,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::LineIntegral => "line-integral",
            Stage::PhotonCounts => "photon-counts",
            Stage::Attenuation => "attenuation",
        }
    }

    fn tag(self) -> u8 {
        match self {
            Stage::LineIntegral => 0,
            Stage::PhotonCounts => 1,
            Stage::Attenuation => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Stage::LineIntegral),
            1 => Some(Stage::PhotonCounts),
            2 => Some(Stage::Attenuation),
            _ => None,
        }
    }
}

/// View-major projection data (`n_views` rows of `n_detectors` bins).
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    pub geometry: Geometry,
    pub stage: Stage,
    pub data: Vec<f32>,
}

impl Sinogram {
    pub fn new(geometry: Geometry, stage: Stage, data: Vec<f32>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(dims(format!(
                "sinogram needs {} bins, got {}",
                geometry.len(),
                data.len()
            )));
        }
        Ok(Sinogram { geometry, stage, data })
    }

    pub fn expect_stage(&self, stage: Stage) -> Result<()> {
        if self.stage == stage {
            Ok(())
        } else {
            Err(Error::Stage {
                expected: stage.name(),
                found: self.stage.name(),
            })
        }
    }

    pub fn view(&self, v: usize) -> &[f32] {
        let d = self.geometry.n_detectors;
        &self.data[v * d..(v + 1) * d]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

/// Joseph ray-driven projector. Each ray is stepped one pixel at a time
/// along its dominant axis with linear interpolation across the other one;
/// [`Projector::adjoint`] applies exactly the transposed weights.
#[derive(Clone, Debug)]
pub struct Projector {
    geo: Geometry,
}

// Views per partial image in the adjoint; fixed so the summation order does
// not depend on the worker count.
const ADJOINT_CHUNK: usize = 8;

impl Projector {
    pub fn new(geo: &Geometry) -> Result<Self> {
        geo.validate()?;
        Ok(Projector { geo: geo.clone() })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geo
    }

    /// Visit every `(pixel index, weight)` touched by ray `(view, det)`.
    #[inline]
    fn for_each_weight(&self, view: usize, det: usize, mut f: impl FnMut(usize, f64)) {
        let n = self.geo.image_size;
        let half = (n as f64 - 1.0) / 2.0;
        let (sin, cos) = self.geo.angles[view].sin_cos();
        let s = self.geo.detector_offset(det);
        if sin.abs() >= cos.abs() {
            // Step over columns; row coordinate from x cos + y sin = s.
            let w = 1.0 / sin.abs();
            for c in 0..n {
                let x = c as f64 - half;
                let rho = half - (s - x * cos) / sin;
                let r0 = rho.floor();
                let frac = rho - r0;
                let r0 = r0 as isize;
                if r0 >= 0 && (r0 as usize) < n {
                    f(r0 as usize * n + c, w * (1.0 - frac));
                }
                if r0 + 1 >= 0 && ((r0 + 1) as usize) < n {
                    f((r0 + 1) as usize * n + c, w * frac);
                }
            }
        } else {
            let w = 1.0 / cos.abs();
            for r in 0..n {
                let y = half - r as f64;
                let chi = (s - y * sin) / cos + half;
                let c0 = chi.floor();
                let frac = chi - c0;
                let c0 = c0 as isize;
                if c0 >= 0 && (c0 as usize) < n {
                    f(r * n + c0 as usize, w * (1.0 - frac));
                }
                if c0 + 1 >= 0 && ((c0 + 1) as usize) < n {
                    f(r * n + (c0 + 1) as usize, w * frac);
                }
            }
        }
    }

    /// Line integrals of a row-major image.
    pub fn forward(&self, img: &[f64]) -> Vec<f64> {
        let nd = self.geo.n_detectors;
        let mut out = vec![0.0; self.geo.len()];
        out.par_chunks_mut(nd).enumerate().for_each(|(v, row)| {
            for (d, bin) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                self.for_each_weight(v, d, |i, w| acc += w * img[i]);
                *bin = acc;
            }
        });
        out
    }

    /// Transpose of [`Projector::forward`].
    pub fn adjoint(&self, sino: &[f64]) -> Vec<f64> {
        let n = self.geo.image_size;
        let nd = self.geo.n_detectors;
        let nv = self.geo.n_views();
        let partials: Vec<Vec<f64>> = (0..nv.div_ceil(ADJOINT_CHUNK))
            .into_par_iter()
            .map(|chunk| {
                let mut part = vec![0.0; n * n];
                for v in chunk * ADJOINT_CHUNK..((chunk + 1) * ADJOINT_CHUNK).min(nv) {
                    for d in 0..nd {
                        let b = sino[v * nd + d];
                        if b != 0.0 {
                            self.for_each_weight(v, d, |i, w| part[i] += w * b);
                        }
                    }
                }
                part
            })
            .collect();
        let mut out = vec![0.0; n * n];
        for part in partials {
            for (o, p) in out.iter_mut().zip(part) {
                *o += p;
            }
        }
        out
    }
}

fn check_image(img: &Image, geo: &Geometry) -> Result<()> {
    if img.width() != geo.image_size || img.height() != geo.image_size {
        return Err(dims(format!(
            "image {}x{} does not match geometry size {}",
            img.width(),
            img.height(),
            geo.image_size
        )));
    }
    Ok(())
}

/// Line-integral sinogram of an image (path length in pixels times value).
pub fn forward_project(img: &Image, geo: &Geometry) -> Result<Sinogram> {
    check_image(img, geo)?;
    let x: Vec<f64> = img.data().iter().map(|&v| f64::from(v)).collect();
    let p = Projector::new(geo)?.forward(&x);
    Sinogram::new(
        geo.clone(),
        Stage::LineIntegral,
        p.into_iter().map(|v| v as f32).collect(),
    )
}

/// Unfiltered adjoint backprojection of any sinogram.
pub fn backproject(sino: &Sinogram) -> Result<Image> {
    let out = Projector::new(&sino.geometry)?.adjoint(&sino.to_f64());
    let n = sino.geometry.image_size;
    Image::new(n, n, out.into_iter().map(|v| v as f32).collect())
}

/// Photon flux model: `I0 = i0_reference * exposure / reference_exposure`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExposureModel {
    pub i0_reference: f64,
    pub reference_exposure: f64,
    pub exposure: f64,
    pub seed: u64,
}

impl ExposureModel {
    pub fn new(i0_reference: f64, reference_exposure: f64, exposure: f64, seed: u64) -> Result<Self> {
        let m = ExposureModel {
            i0_reference,
            reference_exposure,
            exposure,
            seed,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.i0_reference > 0.0 && self.i0_reference.is_finite()) {
            return Err(invalid("reference flux must be positive"));
        }
        if !(self.exposure > 0.0 && self.reference_exposure > 0.0) {
            return Err(invalid("exposure times must be positive"));
        }
        Ok(())
    }

    /// Effective unattenuated photons per bin.
    pub fn flux(&self) -> f64 {
        self.i0_reference * self.exposure / self.reference_exposure
    }
}

/// Largest Poisson mean the sampler accepts.
pub const MAX_POISSON_MEAN: f64 = 1e15;

// Below this mean the sampler inverts the CDF; above it, a rounded Gaussian.
const POISSON_SEARCH_LIMIT: f64 = 30.0;

/// Poisson draw with mean `lambda` from a 64-bit counter key.
pub fn poisson_sample(lambda: f64, key: u64) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    if lambda < POISSON_SEARCH_LIMIT {
        let u = seed::unit_f64(seed::mix64(key));
        let mut p = (-lambda).exp();
        let mut cdf = p;
        let mut k = 0u32;
        while u > cdf && k < 1000 {
            k += 1;
            p *= lambda / f64::from(k);
            cdf += p;
        }
        f64::from(k)
    } else {
        let u1 = 1.0 - seed::unit_f64(seed::mix64(key));
        let u2 = seed::unit_f64(seed::mix64(key ^ 0xA5A5_A5A5_A5A5_A5A5));
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        (lambda + lambda.sqrt() * z).round().max(0.0)
    }
}

/// Expected counts `I0 exp(-p)` per bin.
pub fn mean_counts(sino: &Sinogram, model: &ExposureModel) -> Result<Vec<f64>> {
    sino.expect_stage(Stage::LineIntegral)?;
    model.validate()?;
    let i0 = model.flux();
    Ok(sino.data.iter().map(|&p| i0 * (-f64::from(p)).exp()).collect())
}

/// Independent Poisson counts per bin. Bin `b` draws from key
/// `derive_index(seed, b)`, so the result does not depend on evaluation
/// order or worker count.
pub fn apply_exposure(sino: &Sinogram, model: &ExposureModel) -> Result<Sinogram> {
    let lambda = mean_counts(sino, model)?;
    if model.flux() > MAX_POISSON_MEAN {
        return Err(invalid(format!(
            "flux {} exceeds the sampler cap {MAX_POISSON_MEAN:e}",
            model.flux()
        )));
    }
    let data: Vec<f32> = lambda
        .par_iter()
        .enumerate()
        .map(|(b, &l)| poisson_sample(l, seed::derive_index(model.seed, b as u64)) as f32)
        .collect();
    Sinogram::new(sino.geometry.clone(), Stage::PhotonCounts, data)
}

/// Log transform `-ln(max(count, 1) / I0)`. Bins with more counts than the
/// flux come out slightly negative; they are kept to avoid biasing air.
pub fn counts_to_attenuation(sino: &Sinogram, model: &ExposureModel) -> Result<Sinogram> {
    sino.expect_stage(Stage::PhotonCounts)?;
    model.validate()?;
    let i0 = model.flux();
    let data = sino
        .data
        .iter()
        .map(|&c| (-(f64::from(c).max(1.0) / i0).ln()) as f32)
        .collect();
    Sinogram::new(sino.geometry.clone(), Stage::Attenuation, data)
}

/// Noise-free path: treat `LineIntegral` data as measured attenuation.
pub fn as_attenuation(sino: &Sinogram) -> Result<Sinogram> {
    sino.expect_stage(Stage::LineIntegral)?;
    Ok(Sinogram {
        stage: Stage::Attenuation,
        ..sino.clone()
    })
}

const SINF_MAGIC: &[u8; 4] = b"SINF";
const SINF_VERSION: u16 = 1;

/// SINF: magic, u16 version, u8 stage, u32 image size, u32 views,
/// u32 detectors, f64 spacing, f64 angles, then f32 bins (view-major).
pub fn write_sinf(sino: &Sinogram, w: &mut impl Write) -> Result<()> {
    let g = &sino.geometry;
    w.write_all(SINF_MAGIC)?;
    w.write_all(&SINF_VERSION.to_le_bytes())?;
    w.write_all(&[sino.stage.tag()])?;
    w.write_all(&(g.image_size as u32).to_le_bytes())?;
    w.write_all(&(g.n_views() as u32).to_le_bytes())?;
    w.write_all(&(g.n_detectors as u32).to_le_bytes())?;
    w.write_all(&g.detector_spacing.to_le_bytes())?;
    for a in &g.angles {
        w.write_all(&a.to_le_bytes())?;
    }
    write_f32s(w, &sino.data)
}

pub fn read_sinf(r: &mut impl Read) -> Result<Sinogram> {
    let bad = |reason: String| Error::Format { format: "SINF", reason };
    if &read_array::<4>(r)? != SINF_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = u16::from_le_bytes(read_array(r)?);
    if version != SINF_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let [tag] = read_array::<1>(r)?;
    let stage = Stage::from_tag(tag).ok_or_else(|| bad(format!("unknown stage tag {tag}")))?;
    let image_size = u32::from_le_bytes(read_array(r)?) as usize;
    let n_views = u32::from_le_bytes(read_array(r)?) as usize;
    let n_detectors = u32::from_le_bytes(read_array(r)?) as usize;
    let detector_spacing = f64::from_le_bytes(read_array(r)?);
    let mut angles = Vec::with_capacity(n_views);
    for _ in 0..n_views {
        angles.push(f64::from_le_bytes(read_array(r)?));
    }
    let geometry = Geometry {
        image_size,
        angles,
        n_detectors,
        detector_spacing,
    };
    geometry.validate()?;
    let data = read_f32s(r, geometry.len())?;
    Sinogram::new(geometry, stage, data)
}

pub fn save_sinf(sino: &Sinogram, path: impl AsRef<std::path::Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_sinf(sino, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_sinf(path: impl AsRef<std::path::Path>) -> Result<Sinogram> {
    read_sinf(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}
