//! On-disk datasets, provenance-stamped CSV tables and the output lock.

use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fluxct_core::image::{load_imgf, save_imgf, save_pgm};
use fluxct_core::tomo::save_sinf;
use fluxct_core::Image;

use crate::simulate::{porosities, SimulatedSet};

pub const LOCK_FILE: &str = ".fluxct.lock";

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(OutputLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => bail!(
                "output directory {} is in use by another command (remove {} if stale)",
                dir.display(),
                path.display()
            ),
            Err(e) => Err(e).with_context(|| format!("creating lock {}", path.display())),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Seed and config hash written in front of every CSV row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
}

pub struct Table {
    writer: csv::Writer<File>,
    prefix: [String; 2],
}

impl Table {
    pub fn create(path: &Path, prov: &Provenance, header: &[&str]) -> Result<Self> {
        let mut writer = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
        let mut head = vec!["seed", "config_hash"];
        head.extend_from_slice(header);
        writer.write_record(&head)?;
        Ok(Table {
            writer,
            prefix: [prov.seed.to_string(), prov.config_hash.clone()],
        })
    }

    pub fn row<S: AsRef<str>>(&mut self, fields: &[S]) -> Result<()> {
        let record = self
            .prefix
            .iter()
            .map(String::as_str)
            .chain(fields.iter().map(AsRef::as_ref));
        self.writer.write_record(record)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

pub fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Full-size images of a generated dataset.
#[derive(Clone, Debug)]
pub struct StoredDataset {
    pub truth: Vec<Image>,
    pub low: Vec<Image>,
    pub high: Vec<Image>,
}

fn image_path(dir: &Path, series: &str, i: usize) -> PathBuf {
    dir.join(series).join(format!("{i:04}.imgf"))
}

pub const MANIFEST: &str = "manifest.csv";

pub fn write_dataset(dir: &Path, set: &SimulatedSet, prov: &Provenance) -> Result<()> {
    for sub in ["truth", "low", "high", "sino", "preview"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut manifest = Table::create(
        &dir.join(MANIFEST),
        prov,
        &[
            "index",
            "porosity",
            "noise_std_low",
            "noise_std_high",
            "norm_lo",
            "norm_hi",
        ],
    )?;
    let por = porosities(set);
    for (i, scan) in set.scans.iter().enumerate() {
        for (series, img) in [("truth", &set.truth[i]), ("low", &set.low[i]), ("high", &set.high[i])] {
            save_imgf(img, image_path(dir, series, i))?;
            save_pgm(img, dir.join("preview").join(format!("{i:04}_{series}.pgm")))?;
        }
        save_sinf(&scan.low_sino, dir.join("sino").join(format!("{i:04}_low.sinf")))?;
        save_sinf(&scan.high_sino, dir.join("sino").join(format!("{i:04}_high.sinf")))?;
        manifest.row(&[
            i.to_string(),
            por[i].to_string(),
            opt(scan.noise_low),
            opt(scan.noise_high),
            set.norm.0.to_string(),
            set.norm.1.to_string(),
        ])?;
    }
    manifest.finish()
}

pub fn read_dataset(dir: &Path) -> Result<StoredDataset> {
    let manifest = dir.join(MANIFEST);
    if !manifest.exists() {
        bail!("no dataset at {} (run `fluxct generate` first)", dir.display());
    }
    let mut reader = csv::Reader::from_path(&manifest)?;
    let idx_col = reader
        .headers()?
        .iter()
        .position(|h| h == "index")
        .context("manifest has no index column")?;
    let mut out = StoredDataset {
        truth: Vec::new(),
        low: Vec::new(),
        high: Vec::new(),
    };
    for (expected, rec) in reader.records().enumerate() {
        let i: usize = rec?[idx_col].parse()?;
        if i != expected {
            bail!("manifest rows out of order at index {i}");
        }
        let load = |series| load_imgf(image_path(dir, series, i)).with_context(|| format!("{series} image {i}"));
        out.truth.push(load("truth")?);
        out.low.push(load("low")?);
        out.high.push(load("high")?);
    }
    if out.low.is_empty() {
        bail!("dataset at {} is empty", dir.display());
    }
    Ok(out)
}

/// Column of a CSV file by header name.
pub fn read_column(path: &Path, column: &str) -> Result<Vec<String>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let col = reader
        .headers()?
        .iter()
        .position(|h| h == column)
        .with_context(|| format!("{} has no column {column}", path.display()))?;
    reader.records().map(|r| Ok(r?[col].to_string())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = OutputLock::acquire(dir.path()).unwrap();
        assert!(OutputLock::acquire(dir.path()).is_err());
        drop(lock);
        assert!(OutputLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn every_row_is_stamped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let prov = Provenance {
            seed: 9,
            config_hash: "abc".into(),
        };
        let mut t = Table::create(&path, &prov, &["x"]).unwrap();
        t.row(&["1"]).unwrap();
        t.row(&["2"]).unwrap();
        t.finish().unwrap();
        assert_eq!(read_column(&path, "seed").unwrap(), vec!["9", "9"]);
        assert_eq!(read_column(&path, "config_hash").unwrap(), vec!["abc", "abc"]);
        assert_eq!(read_column(&path, "x").unwrap(), vec!["1", "2"]);
    }
}
