//! Scalar images, normalization, tiling, patch sampling and paired datasets.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{dims, invalid, Error, Result};
use crate::seed;

/// Affine map recorded by [`normalize`]: a stored value `v` corresponds to
/// the raw value `lo + v * (hi - lo)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormMap {
    pub lo: f64,
    pub hi: f64,
}

impl NormMap {
    pub const IDENTITY: NormMap = NormMap { lo: 0.0, hi: 1.0 };

    /// Map obtained by normalizing an image already carrying `self` with
    /// `(lo, hi)` in its own units.
    fn compose(self, lo: f64, hi: f64) -> NormMap {
        let span = self.hi - self.lo;
        NormMap {
            lo: self.lo + lo * span,
            hi: self.hi - (1.0 - hi) * span,
        }
    }
}

impl Default for NormMap {
    fn default() -> Self {
        NormMap::IDENTITY
    }
}

/// Row-major single-channel image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
    map: NormMap,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(dims(format!("image must be non-empty, got {width}x{height}")));
        }
        if data.len() != width * height {
            return Err(dims(format!(
                "{width}x{height} image needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image data"));
        }
        Ok(Image {
            width,
            height,
            data,
            map: NormMap::IDENTITY,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "image must be non-empty");
        Image {
            width,
            height,
            data: vec![0.0; width * height],
            map: NormMap::IDENTITY,
        }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        let mut img = Image::zeros(width, height);
        img.data.fill(value);
        img
    }

    /// Build from a function of `(row, col)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut img = Image::zeros(width, height);
        for r in 0..height {
            for c in 0..width {
                img.data[r * width + c] = f(r, c);
            }
        }
        img
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn map(&self) -> NormMap {
        self.map
    }

    pub fn with_map(mut self, map: NormMap) -> Self {
        self.map = map;
        self
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.data[row * self.width + col] = v;
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_same_dims(&self, other: &Image) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(dims(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Sub-image at `(row, col)` of the given size.
    pub fn crop(&self, row: usize, col: usize, width: usize, height: usize) -> Result<Image> {
        if width == 0 || height == 0 || row + height > self.height || col + width > self.width {
            return Err(dims(format!(
                "crop {width}x{height} at ({row},{col}) exceeds {}x{} image",
                self.width, self.height
            )));
        }
        let mut out = Image::zeros(width, height);
        for r in 0..height {
            let src = (row + r) * self.width + col;
            out.data[r * width..(r + 1) * width].copy_from_slice(&self.data[src..src + width]);
        }
        out.map = self.map;
        Ok(out)
    }

    /// Copy `src` into this image with its top-left corner at `(row, col)`.
    pub fn paste(&mut self, src: &Image, row: usize, col: usize) -> Result<()> {
        if row + src.height > self.height || col + src.width > self.width {
            return Err(dims("pasted image does not fit"));
        }
        for r in 0..src.height {
            let dst = (row + r) * self.width + col;
            self.data[dst..dst + src.width].copy_from_slice(&src.data[r * src.width..(r + 1) * src.width]);
        }
        Ok(())
    }
}

/// Affine normalization `clamp((v - lo) / (hi - lo), 0, 1)`.
pub fn normalize(img: &Image, lo: f64, hi: f64) -> Result<Image> {
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::NonFinite("normalization bounds"));
    }
    if hi <= lo {
        return Err(Error::InvalidRange { lo, hi });
    }
    if img.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("image data"));
    }
    let span = hi - lo;
    let data = img
        .data
        .iter()
        .map(|&v| (((f64::from(v) - lo) / span).clamp(0.0, 1.0)) as f32)
        .collect();
    Ok(Image {
        width: img.width,
        height: img.height,
        data,
        map: img.map.compose(lo, hi),
    })
}

/// Percentile (in percent, linear interpolation between order statistics)
/// over all pixels of all images.
pub fn percentile_bounds(images: &[&Image], lo_pct: f64, hi_pct: f64) -> Result<(f64, f64)> {
    if images.is_empty() {
        return Err(invalid("percentile bounds need at least one image"));
    }
    if !(0.0..=100.0).contains(&lo_pct) || !(0.0..=100.0).contains(&hi_pct) || lo_pct >= hi_pct {
        return Err(invalid(format!("bad percentiles {lo_pct}/{hi_pct}")));
    }
    let mut all: Vec<f32> = images.iter().flat_map(|i| i.data.iter().copied()).collect();
    all.sort_by(f32::total_cmp);
    let at = |pct: f64| {
        let pos = pct / 100.0 * (all.len() - 1) as f64;
        let i = pos.floor() as usize;
        let j = (i + 1).min(all.len() - 1);
        let f = pos - i as f64;
        f64::from(all[i]) * (1.0 - f) + f64::from(all[j]) * f
    };
    let (lo, hi) = (at(lo_pct), at(hi_pct));
    if hi <= lo {
        return Err(Error::InvalidRange { lo, hi });
    }
    Ok((lo, hi))
}

/// A tile cut from a larger image.
#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    /// `(row, col)` of the top-left pixel in the source image.
    pub origin: (usize, usize),
    pub image: Image,
}

/// Non-overlapping `tile`×`tile` tiles over the largest tile-aligned region;
/// the ragged right/bottom border is dropped. Tiles are in row-major order.
pub fn tile(img: &Image, tile: usize) -> Result<Vec<Tile>> {
    if tile == 0 {
        return Err(invalid("tile size must be positive"));
    }
    if tile > img.width.min(img.height) {
        return Err(dims(format!(
            "tile {tile} larger than {}x{} image",
            img.width, img.height
        )));
    }
    let (nr, nc) = (img.height / tile, img.width / tile);
    let mut out = Vec::with_capacity(nr * nc);
    for tr in 0..nr {
        for tc in 0..nc {
            let origin = (tr * tile, tc * tile);
            out.push(Tile {
                origin,
                image: img.crop(origin.0, origin.1, tile, tile)?,
            });
        }
    }
    Ok(out)
}

/// Inverse of [`tile`] over the covered region. Uncovered pixels are zero.
pub fn stitch(tiles: &[Tile], width: usize, height: usize) -> Result<Image> {
    let mut out = Image::zeros(width, height);
    for t in tiles {
        out.paste(&t.image, t.origin.0, t.origin.1)?;
    }
    if let Some(t) = tiles.first() {
        out.map = t.image.map;
    }
    Ok(out)
}

/// Square patch cut at `origin`.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub origin: (usize, usize),
    pub size: usize,
    pub data: Vec<f32>,
}

impl Patch {
    fn cut(img: &Image, origin: (usize, usize), size: usize) -> Patch {
        let mut data = Vec::with_capacity(size * size);
        for r in 0..size {
            let s = (origin.0 + r) * img.width + origin.1;
            data.extend_from_slice(&img.data[s..s + size]);
        }
        Patch { origin, size, data }
    }

    pub fn to_image(&self) -> Image {
        Image {
            width: self.size,
            height: self.size,
            data: self.data.clone(),
            map: NormMap::IDENTITY,
        }
    }
}

/// Patch origins drawn uniformly from `[0, dim - size]` on each axis.
pub fn patch_origins(width: usize, height: usize, size: usize, count: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if size == 0 || size > width.min(height) {
        return Err(dims(format!("patch {size} does not fit {width}x{height}")));
    }
    let mut rng = seed::rng(seed);
    Ok((0..count)
        .map(|_| (rng.gen_range(0..=height - size), rng.gen_range(0..=width - size)))
        .collect())
}

/// `count` co-located patch pairs at seeded uniform origins.
pub fn extract_patches(low: &Image, high: &Image, size: usize, count: usize, seed: u64) -> Result<Vec<(Patch, Patch)>> {
    low.check_same_dims(high)?;
    let origins = patch_origins(low.width, low.height, size, count, seed)?;
    Ok(origins
        .into_iter()
        .map(|o| (Patch::cut(low, o, size), Patch::cut(high, o, size)))
        .collect())
}

/// One low/high exposure observation with optional ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub low: Image,
    pub high: Image,
    pub truth: Option<Image>,
}

impl ImagePair {
    /// Image that quality metrics are measured against: the truth when
    /// known, otherwise the high-exposure label.
    pub fn reference(&self) -> &Image {
        self.truth.as_ref().unwrap_or(&self.high)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub pairs: Vec<ImagePair>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl PairedDataset {
    pub fn train_pairs(&self) -> impl Iterator<Item = &ImagePair> + '_ {
        self.train.iter().map(move |&i| &self.pairs[i])
    }

    pub fn test_pairs(&self) -> impl Iterator<Item = &ImagePair> + '_ {
        self.test.iter().map(move |&i| &self.pairs[i])
    }

    /// Keep only the first `n` training pairs (in split order).
    pub fn truncate_train(&mut self, n: usize) {
        self.train.truncate(n);
    }
}

/// Seeded shuffle of the pairs followed by a train/test split.
pub fn pair_dataset(
    low: Vec<Image>,
    high: Vec<Image>,
    truth: Option<Vec<Image>>,
    train_fraction: f64,
    seed: u64,
) -> Result<PairedDataset> {
    if low.len() != high.len() {
        return Err(dims(format!("{} low vs {} high images", low.len(), high.len())));
    }
    if let Some(t) = &truth {
        if t.len() != low.len() {
            return Err(dims(format!("{} truth vs {} low images", t.len(), low.len())));
        }
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(invalid(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let n = low.len();
    let mut truth_iter = truth.map(Vec::into_iter);
    let mut pairs = Vec::with_capacity(n);
    for (i, (l, h)) in low.into_iter().zip(high).enumerate() {
        l.check_same_dims(&h).map_err(|e| dims(format!("pair {i}: {e}")))?;
        let t = truth_iter.as_mut().and_then(Iterator::next);
        if let Some(t) = &t {
            t.check_same_dims(&l).map_err(|e| dims(format!("truth {i}: {e}")))?;
        }
        pairs.push(ImagePair {
            low: l,
            high: h,
            truth: t,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed));
    let n_train = ((train_fraction * n as f64).round() as usize).min(n);
    let test = order.split_off(n_train);
    Ok(PairedDataset {
        pairs,
        train: order,
        test,
    })
}

const IMGF_MAGIC: &[u8; 4] = b"IMGF";
const IMGF_VERSION: u16 = 1;

fn format_err(format: &'static str, reason: impl Into<String>) -> Error {
    Error::Format {
        format,
        reason: reason.into(),
    }
}

pub(crate) fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub(crate) fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw)?;
    Ok(raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub(crate) fn write_f32s(w: &mut impl Write, values: &[f32]) -> Result<()> {
    let mut raw = Vec::with_capacity(values.len() * 4);
    for v in values {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&raw)?;
    Ok(())
}

/// Serialize as IMGF: magic, u16 version, u32 width, u32 height, f64 lo,
/// f64 hi, then little-endian f32 pixels in row-major order.
pub fn write_imgf(img: &Image, w: &mut impl Write) -> Result<()> {
    w.write_all(IMGF_MAGIC)?;
    w.write_all(&IMGF_VERSION.to_le_bytes())?;
    w.write_all(&(img.width as u32).to_le_bytes())?;
    w.write_all(&(img.height as u32).to_le_bytes())?;
    w.write_all(&img.map.lo.to_le_bytes())?;
    w.write_all(&img.map.hi.to_le_bytes())?;
    write_f32s(w, &img.data)
}

pub fn read_imgf(r: &mut impl Read) -> Result<Image> {
    if &read_array::<4>(r)? != IMGF_MAGIC {
        return Err(format_err("IMGF", "bad magic"));
    }
    let version = u16::from_le_bytes(read_array(r)?);
    if version != IMGF_VERSION {
        return Err(format_err("IMGF", format!("unsupported version {version}")));
    }
    let width = u32::from_le_bytes(read_array(r)?) as usize;
    let height = u32::from_le_bytes(read_array(r)?) as usize;
    let lo = f64::from_le_bytes(read_array(r)?);
    let hi = f64::from_le_bytes(read_array(r)?);
    let data = read_f32s(r, width * height)?;
    Ok(Image::new(width, height, data)?.with_map(NormMap { lo, hi }))
}

pub fn save_imgf(img: &Image, path: impl AsRef<std::path::Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_imgf(img, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_imgf(path: impl AsRef<std::path::Path>) -> Result<Image> {
    read_imgf(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}

/// 16-bit binary PGM (P5). Stored values are clamped to [0, 1] and spread
/// over 0..=65535, so a normalized image shows its `lo..hi` window.
pub fn write_pgm(img: &Image, w: &mut impl Write) -> Result<()> {
    write!(w, "P5\n{} {}\n65535\n", img.width, img.height)?;
    let mut raw = Vec::with_capacity(img.data.len() * 2);
    for &v in &img.data {
        let g = (f64::from(v).clamp(0.0, 1.0) * 65535.0).round() as u16;
        raw.extend_from_slice(&g.to_be_bytes());
    }
    w.write_all(&raw)?;
    Ok(())
}

pub fn save_pgm(img: &Image, path: impl AsRef<std::path::Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_pgm(img, &mut w)?;
    w.flush()?;
    Ok(())
}
