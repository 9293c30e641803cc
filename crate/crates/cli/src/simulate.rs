//! Phantom sets, simulated acquisition at two exposures, reconstruction,
//! joint normalization and tiling into paired datasets.

use anyhow::{Context, Result};
use fluxct_core::image::{normalize, pair_dataset, percentile_bounds, tile};
use fluxct_core::metrics::flat_region_noise_std;
use fluxct_core::phantom::{porosity, rock_phantom, shepp_logan};
use fluxct_core::recon::reconstruct;
use fluxct_core::tomo::{apply_exposure, counts_to_attenuation, forward_project};
use fluxct_core::{seed, ExposureModel, Image, PairedDataset, RockPhantomSpec, Sinogram};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, Family, PhantomConfig};

/// Neighbourhood radius and truth variation allowed for flat-region noise.
pub const FLAT_RADIUS: usize = 2;
pub const FLAT_TOLERANCE: f32 = 0.05;

pub fn make_phantoms(p: &PhantomConfig, seed: u64) -> Result<Vec<Image>> {
    (0..p.count)
        .into_par_iter()
        .map(|i| match p.family {
            Family::Rock => {
                let spec = RockPhantomSpec {
                    seed: seed::derive_index(seed, i as u64),
                    ..p.rock.clone()
                };
                rock_phantom(&spec).with_context(|| format!("phantom {i}"))
            }
            Family::SheppLogan => Ok(shepp_logan(p.rock.size)?),
        })
        .collect()
}

/// One simulated scan of a phantom at both exposures.
#[derive(Clone, Debug)]
pub struct Scan {
    pub truth: Image,
    pub low_sino: Sinogram,
    pub high_sino: Sinogram,
    /// Reconstructions in phantom density units, before normalization.
    pub low_raw: Image,
    pub high_raw: Image,
    pub noise_low: Option<f64>,
    pub noise_high: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SimulatedSet {
    pub scans: Vec<Scan>,
    /// Normalized images sharing the bounds `norm`.
    pub truth: Vec<Image>,
    pub low: Vec<Image>,
    pub high: Vec<Image>,
    pub norm: (f64, f64),
}

fn scan(truth: Image, cfg: &ExperimentConfig, seeds: (u64, u64)) -> Result<Scan> {
    let geo = cfg.geometry()?;
    let e = &cfg.exposure;
    let mut clean = forward_project(&truth, &geo)?;
    let scale = e.attenuation_scale;
    clean.data.iter_mut().for_each(|v| *v = (f64::from(*v) * scale) as f32);
    let acquire = |exposure: f64, s: u64| -> Result<(Sinogram, Image)> {
        let model = ExposureModel::new(e.i0_reference, e.reference_exposure, exposure, s)?;
        let att = counts_to_attenuation(&apply_exposure(&clean, &model)?, &model)?;
        let mut img = reconstruct(&att, &cfg.recon, None)?.image;
        img.data_mut()
            .iter_mut()
            .for_each(|v| *v = (f64::from(*v) / scale) as f32);
        Ok((att, img))
    };
    let (low_sino, low_raw) = acquire(e.low, seeds.0)?;
    let (high_sino, high_raw) = acquire(e.high, seeds.1)?;
    let noise_low = flat_region_noise_std(&low_raw, &truth, FLAT_RADIUS, FLAT_TOLERANCE)?;
    let noise_high = flat_region_noise_std(&high_raw, &truth, FLAT_RADIUS, FLAT_TOLERANCE)?;
    Ok(Scan {
        truth,
        low_sino,
        high_sino,
        low_raw,
        high_raw,
        noise_low,
        noise_high,
    })
}

/// Scan every truth image at the low and high exposure and normalize all
/// three series with percentile bounds taken from the high series.
pub fn simulate(truths: Vec<Image>, cfg: &ExperimentConfig, seed: u64) -> Result<SimulatedSet> {
    let low_seed = seed::derive(seed, "exposure/low");
    let high_seed = seed::derive(seed, "exposure/high");
    let scans: Vec<Scan> = truths
        .into_par_iter()
        .enumerate()
        .map(|(i, t)| {
            let i = i as u64;
            scan(
                t,
                cfg,
                (seed::derive_index(low_seed, i), seed::derive_index(high_seed, i)),
            )
            .with_context(|| format!("scan {i}"))
        })
        .collect::<Result<_>>()?;
    let highs: Vec<&Image> = scans.iter().map(|s| &s.high_raw).collect();
    let (plo, phi) = cfg.data.norm_percentiles;
    let (lo, hi) = percentile_bounds(&highs, plo, phi)?;
    let norm = |img: &Image| normalize(img, lo, hi);
    let truth = scans
        .iter()
        .map(|s| norm(&s.truth))
        .collect::<fluxct_core::Result<_>>()?;
    let low = scans
        .iter()
        .map(|s| norm(&s.low_raw))
        .collect::<fluxct_core::Result<_>>()?;
    let high = scans
        .iter()
        .map(|s| norm(&s.high_raw))
        .collect::<fluxct_core::Result<_>>()?;
    Ok(SimulatedSet {
        scans,
        truth,
        low,
        high,
        norm: (lo, hi),
    })
}

/// Generate the configured phantom family and scan it.
pub fn generate(p: &PhantomConfig, cfg: &ExperimentConfig, seed: u64) -> Result<SimulatedSet> {
    let truths = make_phantoms(p, seed::derive(seed, "phantom"))?;
    simulate(truths, cfg, seed)
}

/// Low, high and optional truth tiles, index-aligned.
pub type TileSets = (Vec<Image>, Vec<Image>, Option<Vec<Image>>);

/// Tiles of every image in order (image-major), truncated to `max_tiles`
/// (0 keeps all). Returned as (low, high, truth) tile lists.
pub fn tiles(
    low: &[Image],
    high: &[Image],
    truth: Option<&[Image]>,
    size: usize,
    max_tiles: usize,
) -> Result<TileSets> {
    let cut = |imgs: &[Image]| -> Result<Vec<Image>> {
        let mut out = Vec::new();
        for img in imgs {
            out.extend(tile(img, size)?.into_iter().map(|t| t.image));
        }
        if max_tiles > 0 {
            out.truncate(max_tiles);
        }
        Ok(out)
    };
    Ok((cut(low)?, cut(high)?, truth.map(cut).transpose()?))
}

/// Tile, truncate and split into a seeded train/test dataset.
pub fn tile_dataset(
    low: &[Image],
    high: &[Image],
    truth: Option<&[Image]>,
    size: usize,
    max_tiles: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<PairedDataset> {
    let (l, h, t) = tiles(low, high, truth, size, max_tiles)?;
    Ok(pair_dataset(l, h, t, train_fraction, seed)?)
}

pub fn porosities(set: &SimulatedSet) -> Vec<f64> {
    set.scans.iter().map(|s| porosity(&s.truth)).collect()
}
