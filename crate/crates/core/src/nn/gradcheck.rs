//! Central finite differences for certifying analytic gradients.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::Result;
use crate::nn::loss::Loss;
use crate::nn::network::Network;
use crate::nn::ops;
use crate::nn::tensor::Tensor;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a| + |b|, floor)` in the Euclidean norm.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()) + norm(&mut b.iter().copied());
    diff / scale.max(1e-12)
}

/// Worst relative error over all parameter tensors of `net` for the given
/// loss at input `x`.
pub fn network_gradient_error(
    net: &Network<f64>,
    x: &Tensor<f64>,
    target: &Tensor<f64>,
    loss: &Loss,
    h: f64,
) -> Result<f64> {
    let trace = net.forward(x)?;
    let (_, g) = loss.eval(trace.output(), target)?;
    let analytic = net.backward(&trace, g);
    let eval = |n: &Network<f64>| -> f64 {
        let out = n.infer(x).expect("shape already checked");
        loss.eval(&out, target).expect("shape already checked").0
    };
    let mut worst: f64 = 0.0;
    for (li, layer) in net.layers.iter().enumerate() {
        if !layer.kind.has_params() {
            continue;
        }
        let mut probe = net.clone();
        let numeric_w = central_difference(&layer.weight, h, |w| {
            probe.layers[li].weight.copy_from_slice(w);
            eval(&probe)
        });
        probe.layers[li].weight.clone_from(&layer.weight);
        let numeric_b = central_difference(&layer.bias, h, |b| {
            probe.layers[li].bias.copy_from_slice(b);
            eval(&probe)
        });
        probe.layers[li].bias.clone_from(&layer.bias);
        worst = worst
            .max(relative_error(&analytic.layers[li].0, &numeric_w))
            .max(relative_error(&analytic.layers[li].1, &numeric_b));
    }
    Ok(worst)
}

/// Operator under a randomized gradient probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Probe {
    Conv { k: usize },
    TConv,
    MaxPool,
    Relu,
    Mse,
    Ssim,
}

impl Probe {
    pub const ALL: [Probe; 7] = [
        Probe::Conv { k: 1 },
        Probe::Conv { k: 3 },
        Probe::TConv,
        Probe::MaxPool,
        Probe::Relu,
        Probe::Mse,
        Probe::Ssim,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Probe::Conv { k: 1 } => "conv1x1",
            Probe::Conv { .. } => "conv3x3",
            Probe::TConv => "tconv",
            Probe::MaxPool => "maxpool",
            Probe::Relu => "relu",
            Probe::Mse => "mse",
            Probe::Ssim => "ssim",
        }
    }
}

fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn tensor(c: usize, h: usize, w: usize, v: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(c, h, w, v.to_vec()).expect("probe shapes are consistent")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Relative error between the analytic gradient and central differences
/// for one random instance of `probe`. Layers are reduced to a scalar by a
/// random linear functional of their output.
pub fn probe_error(probe: Probe, seed: u64, h: f64) -> f64 {
    let mut rng = crate::seed::rng(seed);
    let (analytic, numeric) = match probe {
        Probe::Conv { k } => {
            let (ci, co) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let (hh, ww) = (rng.gen_range(3..=6), rng.gen_range(3..=6));
            let x = uniform(&mut rng, ci * hh * ww, -1.0, 1.0);
            let w = uniform(&mut rng, co * ci * k * k, -1.0, 1.0);
            let b = uniform(&mut rng, co, -1.0, 1.0);
            let r = uniform(&mut rng, co * hh * ww, -1.0, 1.0);
            let (nx, nw) = (x.len(), w.len());
            let packed: Vec<f64> = [x.as_slice(), &w, &b].concat();
            let f = |p: &[f64]| {
                let (y, _) = ops::conv2d_forward(&tensor(ci, hh, ww, &p[..nx]), &p[nx..nx + nw], &p[nx + nw..], k, co)
                    .expect("probe shapes are consistent");
                dot(&y.values, &r)
            };
            let (_, col) = ops::conv2d_forward(&tensor(ci, hh, ww, &x), &w, &b, k, co).expect("probe shapes");
            let g = ops::conv2d_backward(&col, (ci, hh, ww), &w, k, co, &tensor(co, hh, ww, &r));
            let analytic = [g.input.values.as_slice(), &g.weight, &g.bias].concat();
            (analytic, central_difference(&packed, h, f))
        }
        Probe::TConv => {
            let (ci, co) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let (hh, ww) = (rng.gen_range(2..=4), rng.gen_range(2..=4));
            let x = uniform(&mut rng, ci * hh * ww, -1.0, 1.0);
            let w = uniform(&mut rng, ci * co * 4, -1.0, 1.0);
            let b = uniform(&mut rng, co, -1.0, 1.0);
            let r = uniform(&mut rng, co * 4 * hh * ww, -1.0, 1.0);
            let (nx, nw) = (x.len(), w.len());
            let packed: Vec<f64> = [x.as_slice(), &w, &b].concat();
            let f = |p: &[f64]| {
                let y = ops::tconv2d_forward(&tensor(ci, hh, ww, &p[..nx]), &p[nx..nx + nw], &p[nx + nw..], co)
                    .expect("probe shapes are consistent");
                dot(&y.values, &r)
            };
            let g = ops::tconv2d_backward(&tensor(ci, hh, ww, &x), &w, co, &tensor(co, 2 * hh, 2 * ww, &r));
            let analytic = [g.input.values.as_slice(), &g.weight, &g.bias].concat();
            (analytic, central_difference(&packed, h, f))
        }
        Probe::MaxPool => {
            let c = rng.gen_range(1..=2);
            let (hh, ww) = (2 * rng.gen_range(1..=3), 2 * rng.gen_range(1..=3));
            let n = c * hh * ww;
            // Distinct values spaced far beyond the perturbation.
            let mut x: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
            x.shuffle(&mut rng);
            let r = uniform(&mut rng, n / 4, -1.0, 1.0);
            let f = |p: &[f64]| {
                let (y, _) = ops::maxpool2_forward(&tensor(c, hh, ww, p)).expect("even dims");
                dot(&y.values, &r)
            };
            let (_, arg) = ops::maxpool2_forward(&tensor(c, hh, ww, &x)).expect("even dims");
            let g = ops::maxpool2_backward((c, hh, ww), &arg, &tensor(c, hh / 2, ww / 2, &r));
            (g.values, central_difference(&x, h, f))
        }
        Probe::Relu => {
            let c = rng.gen_range(1..=3);
            let (hh, ww) = (rng.gen_range(2..=6), rng.gen_range(2..=6));
            let n = c * hh * ww;
            // Keep every input well away from the kink.
            let x: Vec<f64> = (0..n)
                .map(|_| rng.gen_range(0.05..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
                .collect();
            let r = uniform(&mut rng, n, -1.0, 1.0);
            let f = |p: &[f64]| dot(&ops::relu_forward(&tensor(c, hh, ww, p)).values, &r);
            let y = ops::relu_forward(&tensor(c, hh, ww, &x));
            let g = ops::relu_backward(&y, &tensor(c, hh, ww, &r));
            (g.values, central_difference(&x, h, f))
        }
        Probe::Mse | Probe::Ssim => {
            let (hh, ww) = (rng.gen_range(4..=12), rng.gen_range(4..=12));
            let n = hh * ww;
            let x = uniform(&mut rng, n, 0.0, 1.0);
            let t = tensor(1, hh, ww, &uniform(&mut rng, n, 0.0, 1.0));
            let loss = if probe == Probe::Mse {
                Loss::Mse
            } else {
                Loss::Ssim(crate::metrics::SsimParams::default())
            };
            let f = |p: &[f64]| loss.eval(&tensor(1, hh, ww, p), &t).expect("matching shapes").0;
            let (_, g) = loss.eval(&tensor(1, hh, ww, &x), &t).expect("matching shapes");
            (g.values, central_difference(&x, h, f))
        }
    };
    relative_error(&analytic, &numeric)
}
