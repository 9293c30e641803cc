//! Synthetic ground truth: the Shepp-Logan head phantom, anti-aliased disks,
//! and rock-like grain packs with porosity control.

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::seed;

/// Pixels below this value count as pore space.
pub const PORE_THRESHOLD: f32 = 0.05;

/// Allowed deviation between requested and achieved porosity.
pub const POROSITY_TOLERANCE: f64 = 0.05;

/// Fraction of pixels below [`PORE_THRESHOLD`].
pub fn porosity(img: &Image) -> f64 {
    img.data().iter().filter(|&&v| v < PORE_THRESHOLD).count() as f64 / img.len() as f64
}

// (intensity, semi-axis a, semi-axis b, x0, y0, rotation in degrees); the
// intensity-modified variant whose values stay inside [0, 1].
const SHEPP_LOGAN: [(f64, f64, f64, f64, f64, f64); 10] = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
];

/// Shepp-Logan value at a point of the unit square `[-1, 1]^2` (y up).
pub fn shepp_logan_at(x: f64, y: f64) -> f64 {
    let mut v = 0.0;
    for &(amp, a, b, x0, y0, deg) in &SHEPP_LOGAN {
        let (s, c) = deg.to_radians().sin_cos();
        let (dx, dy) = (x - x0, y - y0);
        let u = dx * c + dy * s;
        let w = -dx * s + dy * c;
        if (u / a).powi(2) + (w / b).powi(2) <= 1.0 {
            v += amp;
        }
    }
    v
}

/// Ten-ellipse Shepp-Logan phantom sampled at pixel centers.
pub fn shepp_logan(size: usize) -> Result<Image> {
    if size < 16 {
        return Err(invalid(format!("Shepp-Logan needs size >= 16, got {size}")));
    }
    let n = size as f64;
    Ok(Image::from_fn(size, size, |r, c| {
        let x = (c as f64 + 0.5) / n * 2.0 - 1.0;
        let y = 1.0 - (r as f64 + 0.5) / n * 2.0;
        shepp_logan_at(x, y).clamp(0.0, 1.0) as f32
    }))
}

/// Fraction of the pixel centered at distance `d` covered by a disk of
/// radius `r`, linearized across the boundary.
#[inline]
fn coverage(r: f64, d: f64) -> f64 {
    (r - d + 0.5).clamp(0.0, 1.0)
}

/// Anti-aliased disk of the given radius centered in a `size`x`size` image.
pub fn disk_phantom(size: usize, radius: f64, value: f32) -> Image {
    let mid = (size as f64 - 1.0) / 2.0;
    Image::from_fn(size, size, |r, c| {
        let d = ((r as f64 - mid).powi(2) + (c as f64 - mid).powi(2)).sqrt();
        (coverage(radius, d) * f64::from(value)) as f32
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RockPhantomSpec {
    pub size: usize,
    /// Size of the candidate grain pool; the porosity search uses a prefix.
    pub grain_count: usize,
    pub grain_radius_range: (f64, f64),
    pub grain_density_range: (f64, f64),
    pub porosity_target: f64,
    pub texture_amplitude: f64,
    pub seed: u64,
}

impl Default for RockPhantomSpec {
    fn default() -> Self {
        RockPhantomSpec {
            size: 128,
            grain_count: 4000,
            grain_radius_range: (3.0, 9.0),
            grain_density_range: (0.4, 0.95),
            porosity_target: 0.25,
            texture_amplitude: 0.04,
            seed: 0,
        }
    }
}

impl RockPhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let (rmin, rmax) = self.grain_radius_range;
        let (dmin, dmax) = self.grain_density_range;
        if self.size == 0 {
            return Err(invalid("phantom size must be positive"));
        }
        if !(0.0 <= rmin && rmin <= rmax) {
            return Err(invalid(format!("bad grain radius range ({rmin}, {rmax})")));
        }
        if !(0.0 <= dmin && dmin <= dmax && dmax <= 1.0) {
            return Err(invalid(format!("bad grain density range ({dmin}, {dmax})")));
        }
        if !(0.0..1.0).contains(&self.porosity_target) {
            return Err(invalid(format!(
                "porosity target {} outside [0, 1)",
                self.porosity_target
            )));
        }
        if !(self.texture_amplitude >= 0.0) {
            return Err(invalid("texture amplitude must be non-negative"));
        }
        Ok(())
    }
}

struct Grain {
    row: f64,
    col: f64,
    radius: f64,
    density: f64,
}

fn grain(spec: &RockPhantomSpec, index: usize) -> Grain {
    let mut rng = seed::rng(seed::derive_index(spec.seed, index as u64));
    let n = spec.size as f64;
    let (rmin, rmax) = spec.grain_radius_range;
    let (dmin, dmax) = spec.grain_density_range;
    Grain {
        row: rng.gen::<f64>() * n,
        col: rng.gen::<f64>() * n,
        radius: rmin + rng.gen::<f64>() * (rmax - rmin),
        density: dmin + rng.gen::<f64>() * (dmax - dmin),
    }
}

/// Zero-mean, unit-variance Gaussian field low-passed at 1/8 of Nyquist.
fn texture_field(size: usize, seed: u64) -> Vec<f64> {
    let mut rng = seed::rng(seed);
    let mut buf: Vec<Complex<f64>> = (0..size * size)
        .map(|_| Complex::new(rng.sample::<f64, _>(StandardNormal), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    fft2(&mut buf, size, fwd.as_ref());
    let cutoff = 0.5 / 8.0;
    let freq = |k: usize| {
        let k = if k <= size / 2 {
            k as f64
        } else {
            k as f64 - size as f64
        };
        k / size as f64
    };
    for r in 0..size {
        for c in 0..size {
            if freq(r).hypot(freq(c)) > cutoff {
                buf[r * size + c] = Complex::new(0.0, 0.0);
            }
        }
    }
    fft2(&mut buf, size, inv.as_ref());
    let field: Vec<f64> = buf.iter().map(|z| z.re).collect();
    let mean = field.iter().sum::<f64>() / field.len() as f64;
    let var = field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / field.len() as f64;
    let sd = var.sqrt();
    if sd > 0.0 {
        field.iter().map(|v| (v - mean) / sd).collect()
    } else {
        vec![0.0; field.len()]
    }
}

fn fft2(buf: &mut [Complex<f64>], size: usize, fft: &dyn rustfft::Fft<f64>) {
    for row in buf.chunks_exact_mut(size) {
        fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); size];
    for c in 0..size {
        for r in 0..size {
            col[r] = buf[r * size + c];
        }
        fft.process(&mut col);
        for r in 0..size {
            buf[r * size + c] = col[r];
        }
    }
}

fn render(spec: &RockPhantomSpec, grains: &[Grain], texture: &[f64]) -> Image {
    let n = spec.size;
    let mut value = vec![0.0f64; n * n];
    let mut alpha = vec![0.0f64; n * n];
    for g in grains {
        let reach = g.radius + 1.0;
        let r0 = (g.row - reach).floor().max(0.0) as usize;
        let r1 = ((g.row + reach).ceil() as usize).min(n);
        let c0 = (g.col - reach).floor().max(0.0) as usize;
        let c1 = ((g.col + reach).ceil() as usize).min(n);
        for r in r0..r1 {
            for c in c0..c1 {
                let d = (r as f64 + 0.5 - g.row).hypot(c as f64 + 0.5 - g.col);
                let cov = coverage(g.radius, d);
                if cov > 0.0 {
                    let i = r * n + c;
                    value[i] = value[i] * (1.0 - cov) + g.density * cov;
                    alpha[i] = alpha[i] * (1.0 - cov) + cov;
                }
            }
        }
    }
    let data = value
        .iter()
        .zip(&alpha)
        .zip(texture)
        .map(|((&v, &a), &t)| (v + spec.texture_amplitude * t * a).clamp(0.0, 1.0) as f32)
        .collect();
    Image::new(n, n, data).expect("rendered phantom is well formed")
}

/// Overlapping anti-aliased grains with band-limited texture on a pore
/// background. The number of grains is searched so that the pore fraction
/// lands within [`POROSITY_TOLERANCE`] of the target.
pub fn rock_phantom(spec: &RockPhantomSpec) -> Result<Image> {
    spec.validate()?;
    let texture = texture_field(spec.size, seed::derive(spec.seed, "texture"));
    let pool: Vec<Grain> = (0..spec.grain_count).map(|i| grain(spec, i)).collect();
    let at = |k: usize| {
        let img = render(spec, &pool[..k], &texture);
        let p = porosity(&img);
        (img, p)
    };

    // Porosity falls as grains are added; bisect for the smallest prefix at
    // or below the target, then keep whichever neighbour is closer.
    let (mut lo, mut hi) = (0usize, spec.grain_count);
    let (full, p_full) = at(hi);
    if p_full > spec.porosity_target {
        return if (p_full - spec.porosity_target).abs() <= POROSITY_TOLERANCE {
            Ok(full)
        } else {
            Err(Error::Porosity {
                target: spec.porosity_target,
                achieved: p_full,
            })
        };
    }
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if at(mid).1 <= spec.porosity_target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let (img_hi, p_hi) = at(hi);
    let (img_lo, p_lo) = at(lo);
    let (img, p) = if (p_lo - spec.porosity_target).abs() < (p_hi - spec.porosity_target).abs() {
        (img_lo, p_lo)
    } else {
        (img_hi, p_hi)
    };
    if (p - spec.porosity_target).abs() > POROSITY_TOLERANCE {
        return Err(Error::Porosity {
            target: spec.porosity_target,
            achieved: p,
        });
    }
    Ok(img)
}
