use crate::error::{dims, Result};
use crate::metrics::{ssim_loss_and_grad, SsimParams};
use crate::nn::tensor::Tensor;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Loss {
    Mse,
    Ssim(SsimParams),
}

impl Loss {
    pub fn name(&self) -> &'static str {
        match self {
            Loss::Mse => "mse",
            Loss::Ssim(_) => "ssim",
        }
    }

    pub fn eval<T: Real>(&self, pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
        match self {
            Loss::Mse => mse_loss(pred, target),
            Loss::Ssim(p) => ssim_loss(pred, target, p),
        }
    }
}

fn check_shapes<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if !pred.same_shape(target) {
        return Err(dims(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// Mean squared error and its gradient `2 (t - r) / N`.
pub fn mse_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    check_shapes(pred, target)?;
    let n = T::of(pred.values.len() as f64);
    let two = T::of(2.0);
    let mut loss = T::zero();
    let grad = pred
        .values
        .iter()
        .zip(&target.values)
        .map(|(&t, &r)| {
            let d = t - r;
            loss += d * d;
            two * d / n
        })
        .collect();
    let (c, h, w) = pred.shape();
    Ok((loss / n, Tensor::from_vec(c, h, w, grad)?))
}

/// `1 - MSSIM` on a single-channel map, with its analytic gradient.
pub fn ssim_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, params: &SsimParams) -> Result<(T, Tensor<T>)> {
    check_shapes(pred, target)?;
    if pred.channels != 1 {
        return Err(dims(format!("SSIM loss needs 1 channel, got {}", pred.channels)));
    }
    let (loss, grad) = ssim_loss_and_grad(&pred.values, &target.values, pred.width, pred.height, params)?;
    Ok((loss, Tensor::from_vec(1, pred.height, pred.width, grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_single_pixel() {
        let p = Tensor::from_vec(1, 1, 1, vec![0.6f64]).unwrap();
        let t = Tensor::from_vec(1, 1, 1, vec![0.4f64]).unwrap();
        let (l, g) = mse_loss(&p, &t).unwrap();
        assert!((l - 0.04).abs() < 1e-15);
        assert!((g.values[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn identity_losses_vanish() {
        let p = Tensor::from_vec(1, 12, 12, (0..144).map(|i| ((i * 37) % 17) as f64 / 17.0).collect()).unwrap();
        let (l, g) = mse_loss(&p, &p).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.values.iter().all(|&v| v == 0.0));
        let (l, g) = ssim_loss(&p, &p, &SsimParams::default()).unwrap();
        assert!(l.abs() < 1e-9);
        assert!(g.values.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-6);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Tensor::<f32>::zeros(1, 4, 4);
        let b = Tensor::<f32>::zeros(1, 4, 5);
        assert!(mse_loss(&a, &b).is_err());
        assert!(ssim_loss(&a, &b, &SsimParams::default()).is_err());
        let c = Tensor::<f32>::zeros(2, 4, 4);
        assert!(ssim_loss(&c, &c, &SsimParams::default()).is_err());
    }
}
