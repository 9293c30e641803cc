//! Layer graph, the VDSR and U-Net builders, backpropagation and Adam.

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{dims, invalid, Result};
use crate::nn::ops;
use crate::nn::tensor::Tensor;
use crate::real::Real;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// Same-padded `k`x`k` convolution.
    Conv {
        k: usize,
        in_c: usize,
        out_c: usize,
    },
    /// 2x2 stride-2 transposed convolution.
    TConv {
        in_c: usize,
        out_c: usize,
    },
    MaxPool,
    Relu,
    /// Append the output of layer `from` to the running feature map.
    ConcatSkip {
        from: usize,
    },
    /// Add the network input to the running (1-channel) feature map.
    ResidualAddInput,
}

impl LayerKind {
    pub fn param_counts(&self) -> (usize, usize) {
        match *self {
            LayerKind::Conv { k, in_c, out_c } => (out_c * in_c * k * k, out_c),
            LayerKind::TConv { in_c, out_c } => (in_c * out_c * 4, out_c),
            _ => (0, 0),
        }
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Conv { k, in_c, .. } => k * k * in_c,
            LayerKind::TConv { in_c, .. } => 4 * in_c,
            _ => 0,
        }
    }

    pub fn has_params(&self) -> bool {
        self.param_counts().0 > 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub kind: LayerKind,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub adam_m_w: Vec<T>,
    pub adam_v_w: Vec<T>,
    pub adam_m_b: Vec<T>,
    pub adam_v_b: Vec<T>,
}

impl<T: Real> Layer<T> {
    pub fn new(kind: LayerKind) -> Self {
        let (nw, nb) = kind.param_counts();
        Layer {
            kind,
            weight: vec![T::zero(); nw],
            bias: vec![T::zero(); nb],
            adam_m_w: vec![T::zero(); nw],
            adam_v_w: vec![T::zero(); nw],
            adam_m_b: vec![T::zero(); nb],
            adam_v_b: vec![T::zero(); nb],
        }
    }

    pub fn clear_moments(&mut self) {
        for v in [
            &mut self.adam_m_w,
            &mut self.adam_v_w,
            &mut self.adam_m_b,
            &mut self.adam_v_b,
        ] {
            v.iter_mut().for_each(|x| *x = T::zero());
        }
    }
}

/// He initialization: weights ~ N(0, 2 / fan_in), biases zero.
pub fn he_init<T: Real>(layer: &mut Layer<T>, seed: u64) {
    let fan_in = layer.kind.fan_in();
    if fan_in == 0 {
        return;
    }
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let mut rng = seed::rng(seed);
    for w in &mut layer.weight {
        *w = T::of(normal.sample(&mut rng));
    }
    layer.bias.iter_mut().for_each(|b| *b = T::zero());
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Topology {
    Vdsr { depth: usize, width: usize },
    UNet { widths: [usize; 3], residual: bool },
}

impl Topology {
    pub fn name(&self) -> &'static str {
        match self {
            Topology::Vdsr { .. } => "vdsr",
            Topology::UNet { .. } => "unet",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub topology: Topology,
    pub layers: Vec<Layer<T>>,
    /// Number of Adam updates applied so far.
    pub adam_step: u64,
}

/// Per-layer parameter gradients; empty vectors for parameterless layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(net: &Network<T>) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| (vec![T::zero(); l.weight.len()], vec![T::zero(); l.bias.len()]))
                .collect(),
        }
    }

    pub fn add(&mut self, other: &Gradients<T>) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.iter_mut().zip(ow).for_each(|(a, &g)| *a += g);
            b.iter_mut().zip(ob).for_each(|(a, &g)| *a += g);
        }
    }

    pub fn scale(&mut self, s: T) {
        for (w, b) in &mut self.layers {
            w.iter_mut().for_each(|v| *v *= s);
            b.iter_mut().for_each(|v| *v *= s);
        }
    }
}

enum Cache<T> {
    None,
    Col(Vec<T>),
    Argmax(Vec<usize>),
}

/// Activations recorded by a forward pass, consumed by backpropagation.
pub struct Trace<T> {
    input: Tensor<T>,
    outputs: Vec<Tensor<T>>,
    caches: Vec<Cache<T>>,
}

impl<T> Trace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.outputs.last().unwrap_or(&self.input)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `params` at step `t >= 1`.
pub fn adam_update<T: Real>(params: &mut [T], grads: &[T], m: &mut [T], v: &mut [T], t: u64, cfg: &AdamConfig) {
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powf(t as f64));
    let c2 = T::of(1.0 - cfg.beta2.powf(t as f64));
    let (lr, eps) = (T::of(cfg.learning_rate), T::of(cfg.eps));
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// VDSR: `depth` 3x3 convolutions (1 -> width -> ... -> width -> 1), ReLU
/// after all but the last, plus a global input skip.
pub fn build_vdsr<T: Real>(depth: usize, width: usize) -> Result<Network<T>> {
    if depth < 2 {
        return Err(invalid(format!("VDSR depth must be at least 2, got {depth}")));
    }
    if width == 0 {
        return Err(invalid("VDSR width must be positive"));
    }
    let mut layers = Vec::with_capacity(2 * depth);
    for i in 0..depth {
        let in_c = if i == 0 { 1 } else { width };
        let out_c = if i == depth - 1 { 1 } else { width };
        layers.push(Layer::new(LayerKind::Conv { k: 3, in_c, out_c }));
        if i != depth - 1 {
            layers.push(Layer::new(LayerKind::Relu));
        }
    }
    layers.push(Layer::new(LayerKind::ResidualAddInput));
    Ok(Network {
        topology: Topology::Vdsr { depth, width },
        layers,
        adam_step: 0,
    })
}

/// U-Net with the default (32, 64, 128) block widths and global residual.
pub fn build_unet<T: Real>() -> Network<T> {
    build_unet_with([32, 64, 128], true).expect("default widths are valid")
}

/// Three encoder blocks of three conv+ReLU, each followed by 2x2 max
/// pooling; three decoder blocks of transposed conv, concatenation with the
/// matching encoder output and three conv+ReLU; a final 1x1 conv to one
/// channel and an optional global input skip.
pub fn build_unet_with<T: Real>(widths: [usize; 3], residual: bool) -> Result<Network<T>> {
    if widths.contains(&0) {
        return Err(invalid("U-Net widths must be positive"));
    }
    let mut layers: Vec<Layer<T>> = Vec::new();
    let push = |layers: &mut Vec<Layer<T>>, kind| {
        layers.push(Layer::new(kind));
        layers.len() - 1
    };
    let mut skips = [0usize; 3];
    let mut c = 1;
    for (b, &w) in widths.iter().enumerate() {
        for i in 0..3 {
            push(
                &mut layers,
                LayerKind::Conv {
                    k: 3,
                    in_c: if i == 0 { c } else { w },
                    out_c: w,
                },
            );
            skips[b] = push(&mut layers, LayerKind::Relu);
        }
        push(&mut layers, LayerKind::MaxPool);
        c = w;
    }
    for b in (0..3).rev() {
        let w = widths[b];
        push(&mut layers, LayerKind::TConv { in_c: c, out_c: w });
        push(&mut layers, LayerKind::ConcatSkip { from: skips[b] });
        for i in 0..3 {
            push(
                &mut layers,
                LayerKind::Conv {
                    k: 3,
                    in_c: if i == 0 { 2 * w } else { w },
                    out_c: w,
                },
            );
            push(&mut layers, LayerKind::Relu);
        }
        c = w;
    }
    push(
        &mut layers,
        LayerKind::Conv {
            k: 1,
            in_c: c,
            out_c: 1,
        },
    );
    if residual {
        push(&mut layers, LayerKind::ResidualAddInput);
    }
    Ok(Network {
        topology: Topology::UNet { widths, residual },
        layers,
        adam_step: 0,
    })
}

impl<T: Real> Network<T> {
    /// He-initialize every parametric layer from per-layer sub-seeds.
    pub fn init_he(&mut self, seed: u64) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            he_init(layer, seed::derive_index(seed, i as u64));
        }
    }

    /// Zero the last parametric layer so a residual network starts as the
    /// identity map.
    pub fn zero_output_layer(&mut self) {
        if let Some(l) = self.layers.iter_mut().rev().find(|l| l.kind.has_params()) {
            l.weight.iter_mut().for_each(|w| *w = T::zero());
            l.bias.iter_mut().for_each(|b| *b = T::zero());
        }
    }

    /// He init with a zeroed output layer: the starting point for training
    /// from scratch.
    pub fn init_scratch(&mut self, seed: u64) {
        self.init_he(seed);
        if self.has_residual() {
            self.zero_output_layer();
        }
    }

    pub fn has_residual(&self) -> bool {
        self.layers.iter().any(|l| l.kind == LayerKind::ResidualAddInput)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Spatial factor the input height and width must be divisible by.
    pub fn size_multiple(&self) -> usize {
        1 << self.layers.iter().filter(|l| l.kind == LayerKind::MaxPool).count()
    }

    pub fn check_input(&self, channels: usize, height: usize, width: usize) -> Result<()> {
        if channels != 1 {
            return Err(dims(format!("networks take 1-channel input, got {channels}")));
        }
        let m = self.size_multiple();
        if height == 0 || width == 0 || !height.is_multiple_of(m) || !width.is_multiple_of(m) {
            return Err(dims(format!(
                "{} input must have height and width divisible by {m}, got {height}x{width}",
                self.topology.name()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Trace<T>> {
        self.check_input(x.channels, x.height, x.width)?;
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let cur = if i == 0 { x } else { &outputs[i - 1] };
            let (out, cache) = match layer.kind {
                LayerKind::Conv { k, out_c, .. } => {
                    let (y, col) = ops::conv2d_forward(cur, &layer.weight, &layer.bias, k, out_c)?;
                    (y, Cache::Col(col))
                }
                LayerKind::TConv { out_c, .. } => (
                    ops::tconv2d_forward(cur, &layer.weight, &layer.bias, out_c)?,
                    Cache::None,
                ),
                LayerKind::MaxPool => {
                    let (y, arg) = ops::maxpool2_forward(cur)?;
                    (y, Cache::Argmax(arg))
                }
                LayerKind::Relu => (ops::relu_forward(cur), Cache::None),
                LayerKind::ConcatSkip { from } => {
                    if from >= i {
                        return Err(invalid(format!("layer {i} concatenates non-earlier layer {from}")));
                    }
                    (ops::concat(cur, &outputs[from])?, Cache::None)
                }
                LayerKind::ResidualAddInput => {
                    if !cur.same_shape(x) {
                        return Err(dims("residual branch shape differs from input"));
                    }
                    let mut y = cur.clone();
                    y.add_assign(x);
                    (y, Cache::None)
                }
            };
            outputs.push(out);
            caches.push(cache);
        }
        Ok(Trace {
            input: x.clone(),
            outputs,
            caches,
        })
    }

    /// Inference without keeping the trace around.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut trace = self.forward(x)?;
        Ok(trace.outputs.pop().unwrap_or_else(|| x.clone()))
    }

    /// Backpropagate `grad_out` (gradient of the loss with respect to the
    /// network output) through a recorded trace.
    pub fn backward(&self, trace: &Trace<T>, grad_out: Tensor<T>) -> Gradients<T> {
        let n = self.layers.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let mut params = Gradients::zeros_like(self);
        let accumulate = |slot: &mut Option<Tensor<T>>, g: Tensor<T>| match slot {
            Some(existing) => existing.add_assign(&g),
            None => *slot = Some(g),
        };
        grads[n - 1] = Some(grad_out);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let input = if i == 0 { &trace.input } else { &trace.outputs[i - 1] };
            let layer = &self.layers[i];
            let g_in = match (layer.kind, &trace.caches[i]) {
                (LayerKind::Conv { k, out_c, .. }, Cache::Col(col)) => {
                    let pg = ops::conv2d_backward(col, input.shape(), &layer.weight, k, out_c, &g);
                    params.layers[i] = (pg.weight, pg.bias);
                    pg.input
                }
                (LayerKind::TConv { out_c, .. }, _) => {
                    let pg = ops::tconv2d_backward(input, &layer.weight, out_c, &g);
                    params.layers[i] = (pg.weight, pg.bias);
                    pg.input
                }
                (LayerKind::MaxPool, Cache::Argmax(arg)) => ops::maxpool2_backward(input.shape(), arg, &g),
                (LayerKind::Relu, _) => ops::relu_backward(&trace.outputs[i], &g),
                (LayerKind::ConcatSkip { from }, _) => {
                    let (g_cur, g_skip) = ops::split(&g, input.channels);
                    accumulate(&mut grads[from], g_skip);
                    g_cur
                }
                // The input-side share of the skip is not needed.
                (LayerKind::ResidualAddInput, _) => g,
                _ => unreachable!("trace cache does not match layer kind"),
            };
            if i > 0 {
                accumulate(&mut grads[i - 1], g_in);
            }
        }
        params
    }

    /// Apply one Adam update from (already batch-averaged) gradients.
    pub fn adam_step(&mut self, grads: &Gradients<T>, cfg: &AdamConfig) {
        self.adam_step += 1;
        let t = self.adam_step;
        self.layers
            .par_iter_mut()
            .zip(&grads.layers)
            .for_each(|(layer, (gw, gb))| {
                if layer.kind.has_params() {
                    adam_update(&mut layer.weight, gw, &mut layer.adam_m_w, &mut layer.adam_v_w, t, cfg);
                    adam_update(&mut layer.bias, gb, &mut layer.adam_m_b, &mut layer.adam_v_b, t, cfg);
                }
            });
    }

    pub fn clear_moments(&mut self) {
        self.adam_step = 0;
        self.layers.iter_mut().for_each(Layer::clear_moments);
    }

    /// Convert the scalar type (used to certify gradients in `f64`).
    pub fn cast<U: Real>(&self) -> Network<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of(x.f64())).collect::<Vec<U>>();
        Network {
            topology: self.topology.clone(),
            adam_step: self.adam_step,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    kind: l.kind,
                    weight: conv(&l.weight),
                    bias: conv(&l.bias),
                    adam_m_w: conv(&l.adam_m_w),
                    adam_v_w: conv(&l.adam_v_w),
                    adam_m_b: conv(&l.adam_m_b),
                    adam_v_b: conv(&l.adam_v_b),
                })
                .collect(),
        }
    }
}
