//! Minibatch training, prediction and held-out scoring.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::image::{extract_patches, Image, ImagePair, PairedDataset};
use crate::metrics::{mssim, psnr, SsimParams};
use crate::nn::loss::Loss;
use crate::nn::network::{AdamConfig, Gradients, Network};
use crate::nn::tensor::Tensor;
use crate::real::Real;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss: Loss,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Square patch side; `None` trains on whole images.
    pub patch_size: Option<usize>,
    pub patches_per_image: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl TrainConfig {
    /// 41x41 patches, 128 per image, 5 epochs, batch 32.
    pub fn vdsr_preset() -> Self {
        TrainConfig {
            loss: Loss::Mse,
            learning_rate: 1e-4,
            epochs: 5,
            batch_size: 32,
            patch_size: Some(41),
            patches_per_image: 128,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Whole-image training, 50 epochs, batch 8.
    pub fn unet_preset() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 8,
            patch_size: None,
            patches_per_image: 1,
            ..TrainConfig::vdsr_preset()
        }
    }

    /// Laptop-scale VDSR run on 64x64 tiles.
    pub fn desk_preset() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            patch_size: Some(32),
            patches_per_image: 16,
            ..TrainConfig::vdsr_preset()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        if self.patch_size == Some(0) || self.patches_per_image == 0 {
            return Err(invalid("patch size and patches per image must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(invalid("Adam needs beta1, beta2 in [0, 1) and eps > 0"));
        }
        if let Loss::Ssim(p) = &self.loss {
            p.validate()?;
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk_preset()
    }
}

/// Epoch 0 describes the network before any update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_psnr: Option<f64>,
    pub test_ssim: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// First epoch whose test SSIM reaches `target`.
    pub fn epochs_to_ssim(&self, target: f64) -> Option<usize> {
        self.epochs
            .iter()
            .find(|r| r.test_ssim.is_some_and(|s| s >= target))
            .map(|r| r.epoch)
    }
}

struct Sample<T> {
    input: Tensor<T>,
    target: Tensor<T>,
}

fn epoch_samples<T: Real>(pairs: &[&ImagePair], cfg: &TrainConfig, epoch: usize) -> Result<Vec<Sample<T>>> {
    let epoch_seed = seed::derive_index(seed::derive(cfg.seed, "epoch"), epoch as u64);
    let mut samples = Vec::new();
    for (i, pair) in pairs.iter().enumerate() {
        match cfg.patch_size {
            None => samples.push(Sample {
                input: Tensor::from_image(&pair.low),
                target: Tensor::from_image(&pair.high),
            }),
            Some(size) => {
                let cut = extract_patches(
                    &pair.low,
                    &pair.high,
                    size,
                    cfg.patches_per_image,
                    seed::derive_index(epoch_seed, i as u64),
                )?;
                for (lo, hi) in cut {
                    samples.push(Sample {
                        input: Tensor::from_image(&lo.to_image()),
                        target: Tensor::from_image(&hi.to_image()),
                    });
                }
            }
        }
    }
    samples.shuffle(&mut seed::rng(seed::derive(epoch_seed, "shuffle")));
    Ok(samples)
}

/// Mean loss and gradient over a minibatch. Per-sample work runs in
/// parallel; the reduction is sequential in sample order.
fn batch_gradient<T: Real>(net: &Network<T>, batch: &[Sample<T>], loss: &Loss) -> Result<(f64, Gradients<T>)> {
    let parts: Vec<Result<(T, Gradients<T>)>> = batch
        .par_iter()
        .map(|s| {
            let trace = net.forward(&s.input)?;
            let (l, g) = loss.eval(trace.output(), &s.target)?;
            Ok((l, net.backward(&trace, g)))
        })
        .collect();
    let mut total = Gradients::zeros_like(net);
    let mut sum = 0.0;
    for part in parts {
        let (l, g) = part?;
        sum += l.f64();
        total.add(&g);
    }
    let n = batch.len() as f64;
    total.scale(T::of(1.0 / n));
    Ok((sum / n, total))
}

fn mean_loss<T: Real>(net: &Network<T>, samples: &[Sample<T>], loss: &Loss) -> Result<f64> {
    let losses: Vec<Result<f64>> = samples
        .par_iter()
        .map(|s| Ok(loss.eval(&net.infer(&s.input)?, &s.target)?.0.f64()))
        .collect();
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / samples.len() as f64)
}

/// Train with a per-epoch observer (called for epoch 0 and after every epoch).
pub fn train_observed<T: Real>(
    net: &mut Network<T>,
    data: &PairedDataset,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&EpochRecord),
) -> Result<TrainHistory> {
    cfg.validate()?;
    let train: Vec<&ImagePair> = data.train_pairs().collect();
    if train.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let test: Vec<&ImagePair> = data.test_pairs().collect();
    let adam = cfg.adam();
    let mut history = TrainHistory::default();
    let mut record = |net: &Network<T>, epoch: usize, train_loss: f64, history: &mut TrainHistory| -> Result<()> {
        let (test_psnr, test_ssim) = if test.is_empty() {
            (None, None)
        } else {
            let s = score_pairs(net, &test)?;
            (Some(s.after_psnr), Some(s.after_ssim))
        };
        let r = EpochRecord {
            epoch,
            train_loss,
            test_psnr,
            test_ssim,
        };
        observe(&r);
        history.epochs.push(r);
        Ok(())
    };
    let mut samples = epoch_samples::<T>(&train, cfg, 1)?;
    let initial = mean_loss(net, &samples, &cfg.loss)?;
    record(net, 0, initial, &mut history)?;
    for epoch in 1..=cfg.epochs {
        if epoch > 1 {
            samples = epoch_samples(&train, cfg, epoch)?;
        }
        let mut sum = 0.0;
        let mut batches = 0;
        for (b, batch) in samples.chunks(cfg.batch_size).enumerate() {
            let (loss, grads) = batch_gradient(net, batch, &cfg.loss)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b, loss });
            }
            net.adam_step(&grads, &adam);
            sum += loss;
            batches += 1;
        }
        record(net, epoch, sum / batches as f64, &mut history)?;
    }
    Ok(history)
}

pub fn train<T: Real>(net: &mut Network<T>, data: &PairedDataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    train_observed(net, data, cfg, |_| {})
}

/// Single forward pass with the output clamped to `[0, 1]`.
pub fn predict<T: Real>(net: &Network<T>, img: &Image) -> Result<Image> {
    let out = net.infer(&Tensor::from_image(img))?;
    let clamped: Vec<f32> = out.values.iter().map(|v| v.f64().clamp(0.0, 1.0) as f32).collect();
    Ok(Image::new(img.width(), img.height(), clamped)?.with_map(img.map()))
}

/// Quality of one pair before (low input) and after denoising, measured
/// against [`ImagePair::reference`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairScore {
    pub before_psnr: f64,
    pub before_ssim: f64,
    pub after_psnr: f64,
    pub after_ssim: f64,
}

pub fn score_pair<T: Real>(net: &Network<T>, pair: &ImagePair) -> Result<(PairScore, Image)> {
    let params = SsimParams::default();
    let reference = pair.reference();
    let out = predict(net, &pair.low)?;
    Ok((
        PairScore {
            before_psnr: psnr(reference, &pair.low, 1.0)?,
            before_ssim: mssim(reference, &pair.low, &params)?,
            after_psnr: psnr(reference, &out, 1.0)?,
            after_ssim: mssim(reference, &out, &params)?,
        },
        out,
    ))
}

/// Mean scores over a set of pairs.
pub fn score_pairs<T: Real>(net: &Network<T>, pairs: &[&ImagePair]) -> Result<PairScore> {
    let scores: Vec<Result<PairScore>> = pairs.par_iter().map(|p| Ok(score_pair(net, p)?.0)).collect();
    let mut mean = PairScore {
        before_psnr: 0.0,
        before_ssim: 0.0,
        after_psnr: 0.0,
        after_ssim: 0.0,
    };
    for s in scores {
        let s = s?;
        mean.before_psnr += s.before_psnr;
        mean.before_ssim += s.before_ssim;
        mean.after_psnr += s.after_psnr;
        mean.after_ssim += s.after_ssim;
    }
    let n = pairs.len() as f64;
    mean.before_psnr /= n;
    mean.before_ssim /= n;
    mean.after_psnr /= n;
    mean.after_ssim /= n;
    Ok(mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::pair_dataset;
    use crate::nn::network::build_vdsr;

    fn noisy_pairs(n: usize, size: usize, seed: u64) -> PairedDataset {
        let mut low = Vec::new();
        let mut high = Vec::new();
        for i in 0..n {
            let s = seed::derive_index(seed, i as u64);
            let clean = Image::from_fn(size, size, |r, c| {
                let v = ((r / 4 + c / 4 + i) % 2) as f32;
                0.25 + 0.5 * v
            });
            let noisy = Image::from_fn(size, size, |r, c| {
                let u = seed::unit_f64(seed::derive_index(s, (r * size + c) as u64));
                (clean.get(r, c) + 0.2 * (u as f32 - 0.5)).clamp(0.0, 1.0)
            });
            low.push(noisy);
            high.push(clean);
        }
        pair_dataset(low, high, None, 0.75, seed).unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            patch_size: Some(8),
            patches_per_image: 4,
            learning_rate: 1e-3,
            seed: 5,
            ..TrainConfig::desk_preset()
        }
    }

    #[test]
    fn identity_task_does_not_get_worse() {
        let img = Image::from_fn(16, 16, |r, c| ((r * 16 + c) % 7) as f32 / 7.0);
        let data = PairedDataset {
            pairs: vec![ImagePair {
                low: img.clone(),
                high: img,
                truth: None,
            }],
            train: vec![0],
            test: vec![],
        };
        let mut net = build_vdsr::<f32>(3, 4).unwrap();
        net.init_he(9);
        let cfg = TrainConfig {
            epochs: 1,
            ..tiny_cfg()
        };
        let h = train(&mut net, &data, &cfg).unwrap();
        let after = mean_loss(
            &net,
            &epoch_samples::<f32>(&[&data.pairs[0]], &cfg, 1).unwrap(),
            &cfg.loss,
        )
        .unwrap();
        assert!(after <= h.epochs[0].train_loss);
    }

    #[test]
    fn training_is_deterministic() {
        let data = noisy_pairs(4, 16, 3);
        let run = || {
            let mut net = build_vdsr::<f32>(3, 4).unwrap();
            net.init_scratch(1);
            let h = train(&mut net, &data, &tiny_cfg()).unwrap();
            (net, h)
        };
        let (a, ha) = run();
        let (b, hb) = run();
        assert_eq!(ha, hb);
        assert_eq!(a, b);
        assert_eq!(ha.epochs.len(), 3);
    }

    #[test]
    fn empty_training_set_rejected() {
        let mut data = noisy_pairs(4, 16, 3);
        data.truncate_train(0);
        let mut net = build_vdsr::<f32>(3, 4).unwrap();
        assert!(train(&mut net, &data, &tiny_cfg()).is_err());
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let data = noisy_pairs(4, 16, 3);
        let mut net = build_vdsr::<f32>(3, 4).unwrap();
        net.init_he(1);
        let cfg = TrainConfig {
            learning_rate: 1e30,
            epochs: 3,
            ..tiny_cfg()
        };
        assert!(matches!(train(&mut net, &data, &cfg), Err(Error::Diverged { .. })));
    }

    #[test]
    fn identity_net_predicts_clamped_input() {
        let mut net = build_vdsr::<f32>(4, 4).unwrap();
        net.init_scratch(2);
        let img = Image::from_fn(8, 8, |r, c| (r * 8 + c) as f32 / 63.0);
        assert_eq!(predict(&net, &img).unwrap(), img);
        let pair = ImagePair {
            low: img.clone(),
            high: Image::filled(8, 8, 0.5),
            truth: None,
        };
        let (s, _) = score_pair(&net, &pair).unwrap();
        assert_eq!(s.before_psnr, s.after_psnr);
        assert_eq!(s.before_ssim, s.after_ssim);
    }
}
