//! Experiment run files.
//!
//! A run file is plain text made of `[section]` headers and `key = value`
//! lines; `#` starts a comment. Every key is optional and falls back to the
//! desk defaults printed by `fluxct print-config`. Lists are comma
//! separated.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use fluxct_core::metrics::SsimParams;
use fluxct_core::nn::{build_unet_with, build_vdsr, Loss, Network, TrainConfig};
use fluxct_core::recon::{Algorithm, Filter, ReconConfig};
use fluxct_core::RockPhantomSpec;
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Rock,
    SheppLogan,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub family: Family,
    pub count: usize,
    /// Seed field is ignored; per-image seeds derive from the master seed.
    pub rock: RockPhantomSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeometryConfig {
    pub views: usize,
    /// 0 selects the smallest detector covering the image diagonal.
    pub detectors: usize,
    pub spacing: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExposureConfig {
    /// Exposure times in seconds.
    pub low: f64,
    pub high: f64,
    pub i0_reference: f64,
    pub reference_exposure: f64,
    /// Attenuation per pixel of a unit-density phantom.
    pub attenuation_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Directory holding a generated dataset; defaults to the `--out` directory.
    pub dataset: Option<PathBuf>,
    pub tile: usize,
    pub train_fraction: f64,
    /// Use only the first this many tiles (0 keeps all).
    pub max_tiles: usize,
    pub norm_percentiles: (f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Vdsr,
    UNet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub preset: Preset,
    pub depth: usize,
    pub width: usize,
    pub unet_widths: [usize; 3],
    pub residual: bool,
}

impl NetworkConfig {
    pub fn build(&self) -> Result<Network<f32>> {
        Ok(match self.preset {
            Preset::Vdsr => build_vdsr(self.depth, self.width)?,
            Preset::UNet => build_unet_with(self.unet_widths, self.residual)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSection {
    pub config: TrainConfig,
    pub warm_start: Option<PathBuf>,
    pub warm_start_moments: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferConfig {
    pub grid: Vec<usize>,
    pub source_count: usize,
    pub pretrain_epochs: usize,
    pub test_tiles: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossStudyConfig {
    pub bins: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClosedLoopConfig {
    pub train_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub phantom: PhantomConfig,
    pub source_phantom: PhantomConfig,
    pub geometry: GeometryConfig,
    pub exposure: ExposureConfig,
    pub recon: ReconConfig,
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub train: TrainSection,
    pub transfer: TransferConfig,
    pub loss_study: LossStudyConfig,
    pub closed_loop: ClosedLoopConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let rock = RockPhantomSpec::default();
        ExperimentConfig {
            seed: 2024,
            phantom: PhantomConfig {
                family: Family::Rock,
                count: 26,
                rock: rock.clone(),
            },
            source_phantom: PhantomConfig {
                family: Family::Rock,
                count: 12,
                rock: RockPhantomSpec {
                    grain_radius_range: (6.0, 14.0),
                    grain_density_range: (0.3, 0.7),
                    porosity_target: 0.35,
                    ..rock
                },
            },
            geometry: GeometryConfig {
                views: 180,
                detectors: 192,
                spacing: 1.0,
            },
            exposure: ExposureConfig {
                low: 0.5,
                high: 1.4,
                i0_reference: 1e4,
                reference_exposure: 1.4,
                attenuation_scale: 0.005,
            },
            recon: ReconConfig::fbp(),
            data: DataConfig {
                dataset: None,
                tile: 64,
                train_fraction: 0.8,
                max_tiles: 50,
                norm_percentiles: (0.1, 99.9),
            },
            network: NetworkConfig {
                preset: Preset::Vdsr,
                depth: 6,
                width: 16,
                unet_widths: [32, 64, 128],
                residual: true,
            },
            train: TrainSection {
                config: TrainConfig::desk_preset(),
                warm_start: None,
                warm_start_moments: false,
            },
            transfer: TransferConfig {
                grid: vec![4, 8, 16, 32],
                source_count: 12,
                pretrain_epochs: 30,
                test_tiles: 16,
            },
            loss_study: LossStudyConfig { bins: 20 },
            closed_loop: ClosedLoopConfig { train_fraction: 0.5 },
        }
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn fmt_list<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

fn algorithm_name(a: Algorithm) -> &'static str {
    match a {
        Algorithm::Fbp => "fbp",
        Algorithm::Sirt => "sirt",
        Algorithm::Cgls => "cgls",
    }
}

fn filter_name(f: Filter) -> &'static str {
    match f {
        Filter::RamLak => "ram-lak",
        Filter::Hann => "hann",
    }
}

fn render_phantom(out: &mut String, name: &str, p: &PhantomConfig) {
    let family = match p.family {
        Family::Rock => "rock",
        Family::SheppLogan => "shepp-logan",
    };
    let r = &p.rock;
    let _ = writeln!(out, "[{name}]");
    let _ = writeln!(out, "family = {family}");
    let _ = writeln!(out, "count = {}", p.count);
    let _ = writeln!(out, "size = {}", r.size);
    let _ = writeln!(out, "grain_count = {}", r.grain_count);
    let _ = writeln!(
        out,
        "grain_radius = {}, {}",
        fmt_f64(r.grain_radius_range.0),
        fmt_f64(r.grain_radius_range.1)
    );
    let _ = writeln!(
        out,
        "grain_density = {}, {}",
        fmt_f64(r.grain_density_range.0),
        fmt_f64(r.grain_density_range.1)
    );
    let _ = writeln!(out, "porosity = {}", fmt_f64(r.porosity_target));
    let _ = writeln!(out, "texture = {}", fmt_f64(r.texture_amplitude));
    out.push('\n');
}

impl ExperimentConfig {
    /// Seconds-scale run of every command: small phantoms, few tiles,
    /// two epochs.
    pub fn smoke() -> Self {
        let mut c = ExperimentConfig::default();
        for p in [&mut c.phantom, &mut c.source_phantom] {
            p.rock.size = 64;
            p.rock.grain_count = 1000;
            p.count = 4;
        }
        c.geometry = GeometryConfig {
            views: 60,
            detectors: 0,
            spacing: 1.0,
        };
        c.data.tile = 32;
        c.data.max_tiles = 0;
        c.train.config.epochs = 2;
        c.train.config.patch_size = Some(16);
        c.train.config.patches_per_image = 4;
        c.transfer = TransferConfig {
            grid: vec![2, 4],
            source_count: 3,
            pretrain_epochs: 2,
            test_tiles: 4,
        };
        c.loss_study.bins = 5;
        c
    }

    /// Canonical text of everything except the master seed.
    fn render_body(&self) -> String {
        let mut o = String::new();
        render_phantom(&mut o, "phantom", &self.phantom);
        render_phantom(&mut o, "source_phantom", &self.source_phantom);
        let g = &self.geometry;
        let _ = writeln!(
            o,
            "[geometry]\nviews = {}\ndetectors = {}\nspacing = {}\n",
            g.views,
            g.detectors,
            fmt_f64(g.spacing)
        );
        let e = &self.exposure;
        let _ = writeln!(
            o,
            "[exposure]\nlow = {}\nhigh = {}\ni0_reference = {}\nreference_exposure = {}\nattenuation_scale = {}\n",
            fmt_f64(e.low),
            fmt_f64(e.high),
            fmt_f64(e.i0_reference),
            fmt_f64(e.reference_exposure),
            fmt_f64(e.attenuation_scale)
        );
        let r = &self.recon;
        let _ = writeln!(
            o,
            "[recon]\nalgorithm = {}\nfilter = {}\niterations = {}\nrelaxation = {}\nnonneg = {}\n",
            algorithm_name(r.algorithm),
            filter_name(r.filter),
            r.iterations,
            fmt_f64(r.relaxation),
            r.nonneg_clamp
        );
        let d = &self.data;
        let _ = writeln!(o, "[data]");
        if let Some(p) = &d.dataset {
            let _ = writeln!(o, "dataset = {}", p.display());
        }
        let _ = writeln!(
            o,
            "tile = {}\ntrain_fraction = {}\nmax_tiles = {}\nnorm_percentiles = {}, {}\n",
            d.tile,
            fmt_f64(d.train_fraction),
            d.max_tiles,
            fmt_f64(d.norm_percentiles.0),
            fmt_f64(d.norm_percentiles.1)
        );
        let n = &self.network;
        let _ = writeln!(
            o,
            "[network]\npreset = {}\ndepth = {}\nwidth = {}\nunet_widths = {}\nresidual = {}\n",
            match n.preset {
                Preset::Vdsr => "vdsr",
                Preset::UNet => "unet",
            },
            n.depth,
            n.width,
            fmt_list(&n.unet_widths),
            n.residual
        );
        let t = &self.train.config;
        let _ = writeln!(o, "[train]\nloss = {}", t.loss.name());
        if let Loss::Ssim(p) = &t.loss {
            let _ = writeln!(o, "ssim_window = {}", p.window.size());
        }
        let _ = writeln!(
            o,
            "learning_rate = {}\nepochs = {}\nbatch_size = {}\npatch_size = {}\npatches_per_image = {}\nbeta1 = {}\nbeta2 = {}\neps = {}",
            fmt_f64(t.learning_rate),
            t.epochs,
            t.batch_size,
            t.patch_size.unwrap_or(0),
            t.patches_per_image,
            fmt_f64(t.beta1),
            fmt_f64(t.beta2),
            fmt_f64(t.eps)
        );
        if let Some(p) = &self.train.warm_start {
            let _ = writeln!(o, "warm_start = {}", p.display());
        }
        let _ = writeln!(o, "warm_start_moments = {}\n", self.train.warm_start_moments);
        let tr = &self.transfer;
        let _ = writeln!(
            o,
            "[transfer]\ngrid = {}\nsource_count = {}\npretrain_epochs = {}\ntest_tiles = {}\n",
            fmt_list(&tr.grid),
            tr.source_count,
            tr.pretrain_epochs,
            tr.test_tiles
        );
        let _ = writeln!(o, "[loss_study]\nbins = {}\n", self.loss_study.bins);
        let _ = writeln!(
            o,
            "[closed_loop]\ntrain_fraction = {}",
            fmt_f64(self.closed_loop.train_fraction)
        );
        o
    }

    /// Complete run file; parsing it yields an identical configuration.
    pub fn render(&self) -> String {
        format!("[experiment]\nseed = {}\n\n{}", self.seed, self.render_body())
    }

    /// Short SHA-256 of the canonical configuration. The seed is excluded so
    /// seed sweeps of one configuration share a hash.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.render_body().as_bytes());
        format!("{digest:x}")[..16].to_string()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = Raw::parse(text)?;
        let mut cfg = ExperimentConfig::default();
        raw.set(&mut cfg.seed, "experiment", "seed")?;
        parse_phantom(&mut raw, "phantom", &mut cfg.phantom)?;
        parse_phantom(&mut raw, "source_phantom", &mut cfg.source_phantom)?;
        let g = &mut cfg.geometry;
        raw.set(&mut g.views, "geometry", "views")?;
        raw.set(&mut g.detectors, "geometry", "detectors")?;
        raw.set(&mut g.spacing, "geometry", "spacing")?;
        let e = &mut cfg.exposure;
        raw.set(&mut e.low, "exposure", "low")?;
        raw.set(&mut e.high, "exposure", "high")?;
        raw.set(&mut e.i0_reference, "exposure", "i0_reference")?;
        raw.set(&mut e.reference_exposure, "exposure", "reference_exposure")?;
        raw.set(&mut e.attenuation_scale, "exposure", "attenuation_scale")?;
        let r = &mut cfg.recon;
        if let Some(v) = raw.take("recon", "algorithm") {
            r.algorithm = match v.as_str() {
                "fbp" => Algorithm::Fbp,
                "sirt" => Algorithm::Sirt,
                "cgls" => Algorithm::Cgls,
                _ => bail!("recon.algorithm must be fbp, sirt or cgls, got {v:?}"),
            };
        }
        if let Some(v) = raw.take("recon", "filter") {
            r.filter = match v.as_str() {
                "ram-lak" => Filter::RamLak,
                "hann" => Filter::Hann,
                _ => bail!("recon.filter must be ram-lak or hann, got {v:?}"),
            };
        }
        raw.set(&mut r.iterations, "recon", "iterations")?;
        raw.set(&mut r.relaxation, "recon", "relaxation")?;
        raw.set(&mut r.nonneg_clamp, "recon", "nonneg")?;
        let d = &mut cfg.data;
        if let Some(v) = raw.take("data", "dataset") {
            d.dataset = Some(PathBuf::from(v));
        }
        raw.set(&mut d.tile, "data", "tile")?;
        raw.set(&mut d.train_fraction, "data", "train_fraction")?;
        raw.set(&mut d.max_tiles, "data", "max_tiles")?;
        raw.set_pair(&mut d.norm_percentiles, "data", "norm_percentiles")?;
        let n = &mut cfg.network;
        if let Some(v) = raw.take("network", "preset") {
            n.preset = match v.as_str() {
                "vdsr" => Preset::Vdsr,
                "unet" => Preset::UNet,
                _ => bail!("network.preset must be vdsr or unet, got {v:?}"),
            };
        }
        raw.set(&mut n.depth, "network", "depth")?;
        raw.set(&mut n.width, "network", "width")?;
        if let Some(v) = raw.take("network", "unet_widths") {
            let w: Vec<usize> = parse_list(&v).context("network.unet_widths")?;
            n.unet_widths = w
                .try_into()
                .map_err(|_| anyhow!("network.unet_widths needs exactly three values"))?;
        }
        raw.set(&mut n.residual, "network", "residual")?;
        let t = &mut cfg.train.config;
        let mut ssim_window: Option<usize> = None;
        raw.set_opt(&mut ssim_window, "train", "ssim_window")?;
        if let Some(v) = raw.take("train", "loss") {
            t.loss = match v.as_str() {
                "mse" => Loss::Mse,
                "ssim" => Loss::Ssim(SsimParams::default()),
                _ => bail!("train.loss must be mse or ssim, got {v:?}"),
            };
        }
        if let (Loss::Ssim(p), Some(size)) = (&mut t.loss, ssim_window) {
            *p = SsimParams::new(fluxct_core::Window::Gaussian { size, sigma: 1.5 }, 1.0);
        }
        raw.set(&mut t.learning_rate, "train", "learning_rate")?;
        raw.set(&mut t.epochs, "train", "epochs")?;
        raw.set(&mut t.batch_size, "train", "batch_size")?;
        let mut patch = t.patch_size.unwrap_or(0);
        raw.set(&mut patch, "train", "patch_size")?;
        t.patch_size = (patch > 0).then_some(patch);
        raw.set(&mut t.patches_per_image, "train", "patches_per_image")?;
        raw.set(&mut t.beta1, "train", "beta1")?;
        raw.set(&mut t.beta2, "train", "beta2")?;
        raw.set(&mut t.eps, "train", "eps")?;
        if let Some(v) = raw.take("train", "warm_start") {
            cfg.train.warm_start = Some(PathBuf::from(v));
        }
        raw.set(&mut cfg.train.warm_start_moments, "train", "warm_start_moments")?;
        let tr = &mut cfg.transfer;
        if let Some(v) = raw.take("transfer", "grid") {
            tr.grid = parse_list(&v).context("transfer.grid")?;
        }
        raw.set(&mut tr.source_count, "transfer", "source_count")?;
        raw.set(&mut tr.pretrain_epochs, "transfer", "pretrain_epochs")?;
        raw.set(&mut tr.test_tiles, "transfer", "test_tiles")?;
        raw.set(&mut cfg.loss_study.bins, "loss_study", "bins")?;
        raw.set(&mut cfg.closed_loop.train_fraction, "closed_loop", "train_fraction")?;
        raw.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("phantom", &self.phantom), ("source_phantom", &self.source_phantom)] {
            if p.count == 0 {
                bail!("{name}.count must be positive");
            }
            p.rock.validate().with_context(|| name.to_string())?;
        }
        let size = self.phantom.rock.size;
        if self.source_phantom.rock.size != size {
            bail!("source_phantom.size must equal phantom.size");
        }
        self.geometry()?;
        let e = &self.exposure;
        for (name, v) in [
            ("low", e.low),
            ("high", e.high),
            ("i0_reference", e.i0_reference),
            ("reference_exposure", e.reference_exposure),
            ("attenuation_scale", e.attenuation_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                bail!("exposure.{name} must be positive, got {v}");
            }
        }
        self.recon.validate()?;
        let d = &self.data;
        if d.tile == 0 || d.tile > size {
            bail!("data.tile must be in 1..={size}");
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            bail!("data.train_fraction must be in (0, 1)");
        }
        let (lo, hi) = d.norm_percentiles;
        if !(0.0 <= lo && lo < hi && hi <= 100.0) {
            bail!("data.norm_percentiles must satisfy 0 <= lo < hi <= 100");
        }
        let net = self.network.build()?;
        if !d.tile.is_multiple_of(net.size_multiple()) {
            bail!(
                "data.tile {} is not divisible by {} as the network requires",
                d.tile,
                net.size_multiple()
            );
        }
        let t = &self.train.config;
        t.validate()?;
        if let Some(p) = t.patch_size {
            if p > d.tile || p % net.size_multiple() != 0 {
                bail!(
                    "train.patch_size {p} must fit a tile and be divisible by {}",
                    net.size_multiple()
                );
            }
        }
        if self.transfer.grid.contains(&0) {
            bail!("transfer.grid entries must be positive");
        }
        if self.loss_study.bins == 0 {
            bail!("loss_study.bins must be positive");
        }
        if !(self.closed_loop.train_fraction > 0.0 && self.closed_loop.train_fraction < 1.0) {
            bail!("closed_loop.train_fraction must be in (0, 1)");
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<fluxct_core::Geometry> {
        let size = self.phantom.rock.size;
        let g = &self.geometry;
        Ok(if g.detectors == 0 {
            fluxct_core::Geometry::covering(size, g.views)?
        } else {
            fluxct_core::Geometry::parallel(size, g.views, g.detectors, g.spacing)?
        })
    }
}

fn parse_phantom(raw: &mut Raw, sec: &str, p: &mut PhantomConfig) -> Result<()> {
    if let Some(v) = raw.take(sec, "family") {
        p.family = match v.as_str() {
            "rock" => Family::Rock,
            "shepp-logan" => Family::SheppLogan,
            _ => bail!("{sec}.family must be rock or shepp-logan, got {v:?}"),
        };
    }
    raw.set(&mut p.count, sec, "count")?;
    let r = &mut p.rock;
    raw.set(&mut r.size, sec, "size")?;
    raw.set(&mut r.grain_count, sec, "grain_count")?;
    raw.set_pair(&mut r.grain_radius_range, sec, "grain_radius")?;
    raw.set_pair(&mut r.grain_density_range, sec, "grain_density")?;
    raw.set(&mut r.porosity_target, sec, "porosity")?;
    raw.set(&mut r.texture_amplitude, sec, "texture")?;
    Ok(())
}

fn parse_list<T: FromStr>(v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(|s| {
            let s = s.trim();
            s.parse::<T>().map_err(|e| anyhow!("{s:?}: {e}"))
        })
        .collect()
}

/// Section -> key -> (value, line number).
struct Raw(BTreeMap<String, BTreeMap<String, (String, usize)>>);

impl Raw {
    fn parse(text: &str) -> Result<Self> {
        let mut map: BTreeMap<String, BTreeMap<String, (String, usize)>> = BTreeMap::new();
        let mut section: Option<String> = None;
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = Some(name.trim().to_string());
                map.entry(name.trim().to_string()).or_default();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {lineno}: expected `key = value` or `[section]`"))?;
            let sec = section
                .as_ref()
                .ok_or_else(|| anyhow!("line {lineno}: key outside any section"))?;
            let key = key.trim().to_string();
            let entry = map.entry(sec.clone()).or_default();
            if entry.insert(key.clone(), (value.trim().to_string(), lineno)).is_some() {
                bail!("line {lineno}: duplicate key {sec}.{key}");
            }
        }
        Ok(Raw(map))
    }

    fn take(&mut self, sec: &str, key: &str) -> Option<String> {
        self.0.get_mut(sec).and_then(|s| s.remove(key)).map(|(v, _)| v)
    }

    fn set<T: FromStr>(&mut self, slot: &mut T, sec: &str, key: &str) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.take(sec, key) {
            *slot = v.parse().map_err(|e| anyhow!("{sec}.{key} = {v:?}: {e}"))?;
        }
        Ok(())
    }

    fn set_opt<T: FromStr>(&mut self, slot: &mut Option<T>, sec: &str, key: &str) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.take(sec, key) {
            *slot = Some(v.parse().map_err(|e| anyhow!("{sec}.{key} = {v:?}: {e}"))?);
        }
        Ok(())
    }

    fn set_pair(&mut self, slot: &mut (f64, f64), sec: &str, key: &str) -> Result<()> {
        if let Some(v) = self.take(sec, key) {
            let vals: Vec<f64> = parse_list(&v).with_context(|| format!("{sec}.{key}"))?;
            let [a, b] = vals[..] else {
                bail!("{sec}.{key} needs two values, got {v:?}");
            };
            *slot = (a, b);
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        for (sec, keys) in self.0 {
            if let Some((key, (_, line))) = keys.into_iter().next() {
                bail!("line {line}: unknown key {sec}.{key}");
            }
        }
        Ok(())
    }
}
