//! The experiment verbs. Each is a pure function of the configuration and
//! seed; all artifacts go under the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fluxct_core::image::{save_imgf, save_pgm};
use fluxct_core::metrics::{mssim, psnr, SsimParams};
use fluxct_core::nn::{
    load_weights, predict, save_weights, score_pair, train_observed, warm_start, warm_start_from, EpochRecord, Loss,
    Network, PairScore, TrainConfig, TrainHistory,
};
use fluxct_core::{seed, Image, PairedDataset};

use crate::config::ExperimentConfig;
use crate::simulate::{generate, simulate, tile_dataset};
use crate::store::{opt, read_dataset, write_dataset, OutputLock, Provenance, StoredDataset, Table};

pub const WEIGHTS_FILE: &str = "weights.nnwt";
pub const HISTORY_FILE: &str = "history.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const TRANSFER_FILE: &str = "transfer.csv";
pub const TRANSFER_HISTORY_FILE: &str = "transfer_history.csv";
pub const SOURCE_WEIGHTS_FILE: &str = "source.nnwt";
pub const LOSS_STUDY_FILE: &str = "loss_study.csv";
pub const LOSS_HISTOGRAM_FILE: &str = "loss_study_hist.csv";
pub const LOSS_HISTORY_FILE: &str = "loss_study_history.csv";
pub const CLOSED_LOOP_FILE: &str = "closed_loop.csv";
pub const CLOSED_LOOP_SUMMARY_FILE: &str = "closed_loop_summary.csv";

#[derive(Clone, Debug)]
pub struct Run {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub weights: Option<PathBuf>,
    /// Print per-epoch progress to stderr.
    pub verbose: bool,
}

impl Run {
    pub fn new(config: ExperimentConfig, out: impl Into<PathBuf>) -> Self {
        Run {
            config,
            out: out.into(),
            weights: None,
            verbose: false,
        }
    }

    pub fn with_weights(mut self, path: impl Into<PathBuf>) -> Self {
        self.weights = Some(path.into());
        self
    }

    fn provenance(&self) -> Provenance {
        Provenance {
            seed: self.config.seed,
            config_hash: self.config.hash(),
        }
    }

    fn sub_seed(&self, label: &str) -> u64 {
        seed::derive(self.config.seed, label)
    }

    fn dataset_dir(&self) -> &Path {
        self.config.data.dataset.as_deref().unwrap_or(&self.out)
    }

    fn weights_path(&self) -> Result<&Path> {
        self.weights.as_deref().context("this command needs --weights <file>")
    }

    fn progress(&self, label: &str) -> impl FnMut(&EpochRecord) + '_ {
        let label = label.to_string();
        move |r: &EpochRecord| {
            if self.verbose {
                eprintln!(
                    "[{label}] epoch {:>3}  loss {:.6}  test psnr {}  ssim {}",
                    r.epoch,
                    r.train_loss,
                    r.test_psnr.map_or("-".into(), |v| format!("{v:.2}")),
                    r.test_ssim.map_or("-".into(), |v| format!("{v:.4}")),
                );
            }
        }
    }

    /// Tiled train/test split of the stored dataset.
    fn tiled(&self, stored: &StoredDataset) -> Result<PairedDataset> {
        let d = &self.config.data;
        tile_dataset(
            &stored.low,
            &stored.high,
            Some(&stored.truth),
            d.tile,
            d.max_tiles,
            d.train_fraction,
            self.sub_seed("split"),
        )
    }

    /// Freshly initialized network of the configured preset.
    fn scratch_network(&self, label: &str) -> Result<Network<f32>> {
        let mut net = self.config.network.build()?;
        net.init_scratch(self.sub_seed(label));
        Ok(net)
    }

    fn train_config(&self, label: &str) -> TrainConfig {
        TrainConfig {
            seed: self.sub_seed(label),
            ..self.config.train.config
        }
    }
}

/// Per-image outcome of `generate`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedImage {
    pub porosity: f64,
    pub noise_std_low: Option<f64>,
    pub noise_std_high: Option<f64>,
}

pub fn cmd_generate(run: &Run) -> Result<Vec<GeneratedImage>> {
    let _lock = OutputLock::acquire(&run.out)?;
    let cfg = &run.config;
    let set = generate(&cfg.phantom, cfg, run.sub_seed("target"))?;
    write_dataset(&run.out, &set, &run.provenance())?;
    let por = crate::simulate::porosities(&set);
    Ok(set
        .scans
        .iter()
        .zip(por)
        .map(|(s, porosity)| GeneratedImage {
            porosity,
            noise_std_low: s.noise_low,
            noise_std_high: s.noise_high,
        })
        .collect())
}

fn write_history(path: &Path, prov: &Provenance, rows: &[(&str, &str, &TrainHistory)]) -> Result<()> {
    let mut t = Table::create(
        path,
        prov,
        &["arm", "group", "epoch", "train_loss", "test_psnr", "test_ssim"],
    )?;
    for (arm, group, h) in rows {
        for r in &h.epochs {
            t.row(&[
                arm.to_string(),
                group.to_string(),
                r.epoch.to_string(),
                r.train_loss.to_string(),
                opt(r.test_psnr),
                opt(r.test_ssim),
            ])?;
        }
    }
    t.finish()
}

pub fn cmd_train(run: &Run) -> Result<TrainHistory> {
    let stored = read_dataset(run.dataset_dir())?;
    let _lock = OutputLock::acquire(&run.out)?;
    let data = run.tiled(&stored)?;
    let mut net = run.scratch_network("init")?;
    if let Some(path) = &run.config.train.warm_start {
        warm_start(&mut net, path, run.config.train.warm_start_moments)
            .with_context(|| format!("warm start from {}", path.display()))?;
    }
    let history = train_observed(&mut net, &data, &run.train_config("train"), run.progress("train"))?;
    save_weights(&net, true, run.out.join(WEIGHTS_FILE))?;
    write_history(
        &run.out.join(HISTORY_FILE),
        &run.provenance(),
        &[("train", "", &history)],
    )?;
    Ok(history)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<PairScore>,
    pub mean: PairScore,
}

fn mean_score(rows: &[PairScore]) -> PairScore {
    let n = rows.len() as f64;
    let avg = |f: fn(&PairScore) -> f64| rows.iter().map(f).sum::<f64>() / n;
    PairScore {
        before_psnr: avg(|s| s.before_psnr),
        before_ssim: avg(|s| s.before_ssim),
        after_psnr: avg(|s| s.after_psnr),
        after_ssim: avg(|s| s.after_ssim),
    }
}

fn score_fields(s: &PairScore) -> [String; 4] {
    [
        s.before_psnr.to_string(),
        s.before_ssim.to_string(),
        s.after_psnr.to_string(),
        s.after_ssim.to_string(),
    ]
}

/// Per-tile scores keyed by tile index, and the denoised tiles.
type Evaluation = (Vec<(usize, PairScore)>, Vec<Image>);

/// Score the test tiles, returning the denoised outputs alongside.
fn evaluate(net: &Network<f32>, data: &PairedDataset) -> Result<Evaluation> {
    use rayon::prelude::*;
    let results: Vec<Result<(PairScore, Image)>> = data
        .test
        .par_iter()
        .map(|&i| Ok(score_pair(net, &data.pairs[i])?))
        .collect();
    let mut rows = Vec::new();
    let mut images = Vec::new();
    for (&i, r) in data.test.iter().zip(results) {
        let (s, img) = r?;
        rows.push((i, s));
        images.push(img);
    }
    Ok((rows, images))
}

pub fn cmd_eval(run: &Run) -> Result<EvalReport> {
    let (net, _) = load_weights(run.weights_path()?).context("loading weights")?;
    let stored = read_dataset(run.dataset_dir())?;
    let _lock = OutputLock::acquire(&run.out)?;
    let data = run.tiled(&stored)?;
    let (rows, images) = evaluate(&net, &data)?;
    let dir = run.out.join("denoised");
    fs::create_dir_all(&dir)?;
    let mut t = Table::create(
        &run.out.join(EVAL_FILE),
        &run.provenance(),
        &["tile", "before_psnr", "before_ssim", "after_psnr", "after_ssim"],
    )?;
    for ((i, s), img) in rows.iter().zip(&images) {
        save_imgf(img, dir.join(format!("tile_{i:04}.imgf")))?;
        save_pgm(img, dir.join(format!("tile_{i:04}.pgm")))?;
        let mut f = vec![i.to_string()];
        f.extend(score_fields(s));
        t.row(&f)?;
    }
    let scores: Vec<PairScore> = rows.into_iter().map(|(_, s)| s).collect();
    let mean = mean_score(&scores);
    let mut f = vec!["mean".to_string()];
    f.extend(score_fields(&mean));
    t.row(&f)?;
    t.finish()?;
    Ok(EvalReport { rows: scores, mean })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferRow {
    pub n_train: usize,
    pub arm: &'static str,
    pub mean_ssim: f64,
    pub mean_psnr: f64,
    pub history: TrainHistory,
}

pub fn cmd_transfer_study(run: &Run) -> Result<Vec<TransferRow>> {
    let cfg = &run.config;
    let tr = &cfg.transfer;
    if tr.grid.is_empty() {
        bail!("transfer.grid is empty");
    }
    let _lock = OutputLock::acquire(&run.out)?;
    let d = &cfg.data;

    let mut source_family = cfg.source_phantom.clone();
    source_family.count = tr.source_count;
    let source = generate(&source_family, cfg, run.sub_seed("source"))?;
    let source_data = tile_dataset(
        &source.low,
        &source.high,
        Some(&source.truth),
        d.tile,
        0,
        d.train_fraction,
        run.sub_seed("source/split"),
    )?;
    let mut pretrained = run.scratch_network("source/init")?;
    let pre_cfg = TrainConfig {
        epochs: tr.pretrain_epochs,
        ..run.train_config("source/train")
    };
    let pre_history = train_observed(&mut pretrained, &source_data, &pre_cfg, run.progress("source"))?;
    save_weights(&pretrained, false, run.out.join(SOURCE_WEIGHTS_FILE))?;

    let target = generate(&cfg.phantom, cfg, run.sub_seed("target"))?;
    let mut data = tile_dataset(
        &target.low,
        &target.high,
        Some(&target.truth),
        d.tile,
        0,
        0.5,
        run.sub_seed("transfer/split"),
    )?;
    let mut order = data.train.clone();
    order.extend(&data.test);
    if order.len() < tr.test_tiles + tr.grid.iter().max().copied().unwrap_or(0) {
        bail!(
            "{} target tiles cannot hold {} test tiles plus the largest grid point",
            order.len(),
            tr.test_tiles
        );
    }
    let pool = order.split_off(tr.test_tiles);
    data.test = order;

    let mut rows = Vec::new();
    for &n in &tr.grid {
        data.train = pool[..n].to_vec();
        let arm_cfg = run.train_config(&format!("transfer/train/{n}"));
        for arm in ["scratch", "warm"] {
            let mut net = run.scratch_network("transfer/init")?;
            if arm == "warm" {
                warm_start_from(&mut net, &pretrained, false)?;
            }
            let history = train_observed(&mut net, &data, &arm_cfg, run.progress(&format!("{arm} n={n}")))?;
            let last = history.last().context("empty history")?;
            rows.push(TransferRow {
                n_train: n,
                arm,
                mean_ssim: last.test_ssim.context("no test set")?,
                mean_psnr: last.test_psnr.context("no test set")?,
                history,
            });
        }
    }

    let prov = run.provenance();
    let mut t = Table::create(
        &run.out.join(TRANSFER_FILE),
        &prov,
        &["n_train", "arm", "mean_ssim", "mean_psnr", "epochs_to_scratch_final"],
    )?;
    for pair in rows.chunks(2) {
        let scratch_final = pair[0].mean_ssim;
        for r in pair {
            t.row(&[
                r.n_train.to_string(),
                r.arm.to_string(),
                r.mean_ssim.to_string(),
                r.mean_psnr.to_string(),
                r.history
                    .epochs_to_ssim(scratch_final)
                    .map_or_else(String::new, |e| e.to_string()),
            ])?;
        }
    }
    t.finish()?;
    let groups: Vec<String> = rows.iter().map(|r| r.n_train.to_string()).collect();
    let mut hist: Vec<(&str, &str, &TrainHistory)> = vec![("source", "", &pre_history)];
    hist.extend(rows.iter().zip(&groups).map(|(r, g)| (r.arm, g.as_str(), &r.history)));
    write_history(&run.out.join(TRANSFER_HISTORY_FILE), &prov, &hist)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossArm {
    pub loss: &'static str,
    pub report: EvalReport,
    pub history: TrainHistory,
}

/// `bins` equal-width bins over `[lo, hi]`; the top edge is inclusive.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    let width = (hi - lo) / bins as f64;
    for &v in values {
        if !(lo..=hi).contains(&v) || width <= 0.0 {
            continue;
        }
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
}

pub fn cmd_loss_study(run: &Run) -> Result<Vec<LossArm>> {
    let stored = read_dataset(run.dataset_dir())?;
    let _lock = OutputLock::acquire(&run.out)?;
    let data = run.tiled(&stored)?;
    let mut arms = Vec::new();
    for loss in [Loss::Mse, Loss::Ssim(SsimParams::default())] {
        let mut net = run.scratch_network("init")?;
        let cfg = TrainConfig {
            loss,
            ..run.train_config("train")
        };
        let history = train_observed(&mut net, &data, &cfg, run.progress(loss.name()))?;
        let (rows, _) = evaluate(&net, &data)?;
        let rows: Vec<PairScore> = rows.into_iter().map(|(_, s)| s).collect();
        arms.push(LossArm {
            loss: loss.name(),
            report: EvalReport {
                mean: mean_score(&rows),
                rows,
            },
            history,
        });
    }

    let prov = run.provenance();
    let mut t = Table::create(
        &run.out.join(LOSS_STUDY_FILE),
        &prov,
        &["arm", "tile", "before_psnr", "before_ssim", "after_psnr", "after_ssim"],
    )?;
    for arm in &arms {
        for (i, s) in data.test.iter().zip(&arm.report.rows) {
            let mut f = vec![arm.loss.to_string(), i.to_string()];
            f.extend(score_fields(s));
            t.row(&f)?;
        }
    }
    t.finish()?;

    let bins = run.config.loss_study.bins;
    let all_psnr: Vec<f64> = arms
        .iter()
        .flat_map(|a| a.report.rows.iter().flat_map(|s| [s.before_psnr, s.after_psnr]))
        .filter(|v| v.is_finite())
        .collect();
    let p_lo = all_psnr.iter().copied().fold(f64::INFINITY, f64::min).floor();
    let p_hi = all_psnr.iter().copied().fold(f64::NEG_INFINITY, f64::max).ceil();
    let mut h = Table::create(
        &run.out.join(LOSS_HISTOGRAM_FILE),
        &prov,
        &["arm", "metric", "stage", "bin_lo", "bin_hi", "count"],
    )?;
    for arm in &arms {
        let series: [(&str, &str, Vec<f64>, f64, f64); 4] = [
            (
                "psnr",
                "before",
                arm.report.rows.iter().map(|s| s.before_psnr).collect(),
                p_lo,
                p_hi,
            ),
            (
                "psnr",
                "after",
                arm.report.rows.iter().map(|s| s.after_psnr).collect(),
                p_lo,
                p_hi,
            ),
            (
                "ssim",
                "before",
                arm.report.rows.iter().map(|s| s.before_ssim).collect(),
                0.0,
                1.0,
            ),
            (
                "ssim",
                "after",
                arm.report.rows.iter().map(|s| s.after_ssim).collect(),
                0.0,
                1.0,
            ),
        ];
        for (metric, stage, values, lo, hi) in series {
            let width = (hi - lo) / bins as f64;
            for (b, c) in histogram(&values, lo, hi, bins).into_iter().enumerate() {
                h.row(&[
                    arm.loss.to_string(),
                    metric.to_string(),
                    stage.to_string(),
                    (lo + b as f64 * width).to_string(),
                    (lo + (b + 1) as f64 * width).to_string(),
                    c.to_string(),
                ])?;
            }
        }
    }
    h.finish()?;
    let hist: Vec<(&str, &str, &TrainHistory)> = arms.iter().map(|a| (a.loss, "", &a.history)).collect();
    write_history(&run.out.join(LOSS_HISTORY_FILE), &prov, &hist)?;
    Ok(arms)
}

/// Mean quality of one series against the known truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeriesScore {
    pub ssim: f64,
    pub psnr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClosedLoopReport {
    pub test_tiles: usize,
    pub low: SeriesScore,
    pub high: SeriesScore,
    pub net: SeriesScore,
    pub history: TrainHistory,
}

pub fn cmd_closed_loop(run: &Run) -> Result<ClosedLoopReport> {
    let (denoiser, _) = load_weights(run.weights_path()?).context("loading weights")?;
    let stored = read_dataset(run.dataset_dir())?;
    let _lock = OutputLock::acquire(&run.out)?;
    let cfg = &run.config;

    // The trained network's outputs become the known ground truth.
    let truths = stored
        .low
        .iter()
        .map(|img| Ok(predict(&denoiser, img)?.with_map(Default::default())))
        .collect::<Result<Vec<Image>>>()?;
    let set = simulate(truths, cfg, run.sub_seed("closed-loop"))?;
    let data = tile_dataset(
        &set.low,
        &set.high,
        Some(&set.truth),
        cfg.data.tile,
        0,
        cfg.closed_loop.train_fraction,
        run.sub_seed("closed-loop/split"),
    )?;
    let mut net = run.scratch_network("closed-loop/init")?;
    let history = train_observed(
        &mut net,
        &data,
        &run.train_config("closed-loop/train"),
        run.progress("closed-loop"),
    )?;

    let params = SsimParams::default();
    let prov = run.provenance();
    let mut t = Table::create(
        &run.out.join(CLOSED_LOOP_FILE),
        &prov,
        &[
            "tile",
            "ssim_low",
            "ssim_high",
            "ssim_net",
            "psnr_low",
            "psnr_high",
            "psnr_net",
        ],
    )?;
    let mut sums = [0.0f64; 6];
    for &i in &data.test {
        let p = &data.pairs[i];
        let truth = p.truth.as_ref().context("closed loop tiles carry truth")?;
        let out = predict(&net, &p.low)?;
        let v = [
            mssim(truth, &p.low, &params)?,
            mssim(truth, &p.high, &params)?,
            mssim(truth, &out, &params)?,
            psnr(truth, &p.low, 1.0)?,
            psnr(truth, &p.high, 1.0)?,
            psnr(truth, &out, 1.0)?,
        ];
        let mut f = vec![i.to_string()];
        f.extend(v.iter().map(|x| x.to_string()));
        t.row(&f)?;
        sums.iter_mut().zip(v).for_each(|(s, x)| *s += x);
    }
    t.finish()?;
    let n = data.test.len() as f64;
    let series = |k: usize| SeriesScore {
        ssim: sums[k] / n,
        psnr: sums[k + 3] / n,
    };
    let report = ClosedLoopReport {
        test_tiles: data.test.len(),
        low: series(0),
        high: series(1),
        net: series(2),
        history,
    };
    let mut s = Table::create(
        &run.out.join(CLOSED_LOOP_SUMMARY_FILE),
        &prov,
        &["series", "mean_ssim", "mean_psnr", "test_tiles"],
    )?;
    for (name, sc) in [("low", report.low), ("high", report.high), ("net", report.net)] {
        s.row(&[
            name.to_string(),
            sc.ssim.to_string(),
            sc.psnr.to_string(),
            report.test_tiles.to_string(),
        ])?;
    }
    s.finish()?;
    Ok(report)
}
