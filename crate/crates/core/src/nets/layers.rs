//! Layer stack with explicit forward traces and reverse-mode gradients.
//!
//! A [`Network`] owns one flat parameter vector and one flat state vector
//! (batch-norm running statistics). Layers refer to their slices by offset,
//! so optimizers and checkpoints deal with plain `Vec<f64>`s.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch normalization.
    Train,
    /// Running statistics; outputs depend only on parameters and input.
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    /// Flattens its input and applies `W x + b`; output is `[n, outputs, 1, 1]`.
    Linear {
        inputs: usize,
        outputs: usize,
        w: usize,
        b: usize,
    },
    Reshape {
        c: usize,
        h: usize,
        w: usize,
    },
    Conv {
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        w: usize,
        b: usize,
    },
    /// Transposed convolution; weights laid out `[cin, cout, k, k]`.
    Deconv {
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        w: usize,
        b: usize,
    },
    BatchNorm {
        channels: usize,
        gamma: usize,
        beta: usize,
        /// Offset of running mean; running variance follows it.
        running: usize,
    },
    LeakyRelu(f64),
    Relu,
    Tanh,
    Sigmoid,
}

impl Layer {
    fn signature(&self) -> String {
        match self {
            Layer::Linear { inputs, outputs, .. } => format!("linear({inputs}->{outputs})"),
            Layer::Reshape { c, h, w } => format!("reshape({c}x{h}x{w})"),
            Layer::Conv {
                cin,
                cout,
                kernel,
                stride,
                pad,
                ..
            } => format!("conv({cin}->{cout},k{kernel},s{stride},p{pad})"),
            Layer::Deconv {
                cin,
                cout,
                kernel,
                stride,
                pad,
                ..
            } => format!("deconv({cin}->{cout},k{kernel},s{stride},p{pad})"),
            Layer::BatchNorm { channels, .. } => format!("bn({channels})"),
            Layer::LeakyRelu(s) => format!("lrelu({s})"),
            Layer::Relu => "relu".into(),
            Layer::Tanh => "tanh".into(),
            Layer::Sigmoid => "sigmoid".into(),
        }
    }
}

/// Batch statistics captured by a training-mode batch-norm forward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    mean: Vec<f64>,
    var: Vec<f64>,
    inv_std: Vec<f64>,
    xhat: Vec<f64>,
}

/// Activations of one forward pass; `acts[0]` is the input and `acts[i+1]`
/// the output of layer `i`.
#[derive(Debug, Clone)]
pub struct Trace {
    pub acts: Vec<Tensor>,
    bn: Vec<Option<BnCache>>,
    mode: Mode,
}

impl Trace {
    pub fn output(&self) -> &Tensor {
        self.acts.last().expect("trace has an input")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<Layer>,
    params: Vec<f64>,
    state: Vec<f64>,
}

impl Network {
    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn signature(&self) -> String {
        self.layers
            .iter()
            .map(Layer::signature)
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Trace {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut bn = Vec::with_capacity(self.layers.len());
        acts.push(x.clone());
        for layer in &self.layers {
            let input = acts.last().unwrap();
            let (out, cache) = self.forward_layer(layer, input, mode);
            acts.push(out);
            bn.push(cache);
        }
        Trace { acts, bn, mode }
    }

    /// Back-propagates `dy` (gradient w.r.t. the trace output). Parameter
    /// gradients are accumulated into `grad` when given. Returns the gradient
    /// w.r.t. the trace input.
    pub fn backward(&self, trace: &Trace, dy: &Tensor, grad: Option<&mut [f64]>) -> Tensor {
        self.backward_tapped(trace, dy, &[], grad)
    }

    /// Like [`Network::backward`], with extra upstream gradients injected at
    /// intermediate activations: each tap `(k, g)` adds `g` to the gradient
    /// of `trace.acts[k]`.
    pub fn backward_tapped(
        &self,
        trace: &Trace,
        dy: &Tensor,
        taps: &[(usize, &Tensor)],
        mut grad: Option<&mut [f64]>,
    ) -> Tensor {
        assert!(dy.same_shape(trace.output()), "gradient shape mismatch");
        if let Some(g) = grad.as_deref() {
            assert_eq!(g.len(), self.params.len(), "gradient buffer size");
        }
        let mut dy = dy.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            for (k, g) in taps {
                if *k == i + 1 {
                    dy.add_assign(g);
                }
            }
            dy = self.backward_layer(
                layer,
                &trace.acts[i],
                &trace.acts[i + 1],
                trace.bn[i].as_ref(),
                trace.mode,
                &dy,
                grad.as_deref_mut(),
            );
        }
        for (k, g) in taps {
            if *k == 0 {
                dy.add_assign(g);
            }
        }
        dy
    }

    /// Folds the batch statistics of a training-mode trace into the running
    /// statistics.
    pub fn update_running_stats(&mut self, trace: &Trace) {
        for (i, (layer, cache)) in self.layers.iter().zip(&trace.bn).enumerate() {
            if let (Layer::BatchNorm { channels, running, .. }, Some(c)) = (layer, cache) {
                let x = &trace.acts[i];
                let count = x.n * x.h * x.w;
                let unbias = if count > 1 {
                    count as f64 / (count - 1) as f64
                } else {
                    1.0
                };
                for ch in 0..*channels {
                    let rm = &mut self.state[running + ch];
                    *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * c.mean[ch];
                    let rv = &mut self.state[running + channels + ch];
                    *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * c.var[ch] * unbias;
                }
            }
        }
    }

    fn forward_layer(&self, layer: &Layer, x: &Tensor, mode: Mode) -> (Tensor, Option<BnCache>) {
        let p = &self.params;
        match *layer {
            Layer::Linear {
                inputs,
                outputs,
                w,
                b,
            } => {
                assert_eq!(x.sample_len(), inputs, "linear input size");
                let mut y = Tensor::zeros(x.n, outputs, 1, 1);
                for n in 0..x.n {
                    let xs = x.sample(n);
                    for o in 0..outputs {
                        let row = &p[w + o * inputs..w + (o + 1) * inputs];
                        y.data[n * outputs + o] = p[b + o] + dot(row, xs);
                    }
                }
                (y, None)
            }
            Layer::Reshape { c, h, w } => {
                assert_eq!(x.sample_len(), c * h * w, "reshape size");
                (Tensor::from_vec(x.n, c, h, w, x.data.clone()), None)
            }
            Layer::Conv {
                cin,
                cout,
                kernel,
                stride,
                pad,
                w,
                b,
            } => {
                assert_eq!(x.c, cin, "conv input channels");
                let oh = (x.h + 2 * pad - kernel) / stride + 1;
                let ow = (x.w + 2 * pad - kernel) / stride + 1;
                let mut y = Tensor::zeros(x.n, cout, oh, ow);
                for n in 0..x.n {
                    for co in 0..cout {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = p[b + co];
                                for ci in 0..cin {
                                    for ky in 0..kernel {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= x.h as isize {
                                            continue;
                                        }
                                        for kx in 0..kernel {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= x.w as isize {
                                                continue;
                                            }
                                            let wi = w + ((co * cin + ci) * kernel + ky) * kernel + kx;
                                            acc += p[wi] * x.data[x.idx(n, ci, iy as usize, ix as usize)];
                                        }
                                    }
                                }
                                let yi = y.idx(n, co, oy, ox);
                                y.data[yi] = acc;
                            }
                        }
                    }
                }
                (y, None)
            }
            Layer::Deconv {
                cin,
                cout,
                kernel,
                stride,
                pad,
                w,
                b,
            } => {
                assert_eq!(x.c, cin, "deconv input channels");
                let oh = (x.h - 1) * stride + kernel - 2 * pad;
                let ow = (x.w - 1) * stride + kernel - 2 * pad;
                let mut y = Tensor::zeros(x.n, cout, oh, ow);
                for n in 0..x.n {
                    for co in 0..cout {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let yi = y.idx(n, co, oy, ox);
                                y.data[yi] = p[b + co];
                            }
                        }
                    }
                    for ci in 0..cin {
                        for iy in 0..x.h {
                            for ix in 0..x.w {
                                let xv = x.data[x.idx(n, ci, iy, ix)];
                                for co in 0..cout {
                                    for ky in 0..kernel {
                                        let oy = (iy * stride + ky) as isize - pad as isize;
                                        if oy < 0 || oy >= oh as isize {
                                            continue;
                                        }
                                        for kx in 0..kernel {
                                            let ox = (ix * stride + kx) as isize - pad as isize;
                                            if ox < 0 || ox >= ow as isize {
                                                continue;
                                            }
                                            let wi = w + ((ci * cout + co) * kernel + ky) * kernel + kx;
                                            let yi = y.idx(n, co, oy as usize, ox as usize);
                                            y.data[yi] += xv * p[wi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                (y, None)
            }
            Layer::BatchNorm {
                channels,
                gamma,
                beta,
                running,
            } => {
                assert_eq!(x.c, channels, "batch-norm channels");
                let hw = x.h * x.w;
                let count = x.n * hw;
                let mut y = Tensor::zeros(x.n, x.c, x.h, x.w);
                match mode {
                    Mode::Eval => {
                        for ch in 0..channels {
                            let mean = self.state[running + ch];
                            let inv = 1.0 / (self.state[running + channels + ch] + BN_EPS).sqrt();
                            for n in 0..x.n {
                                let base = (n * channels + ch) * hw;
                                for k in base..base + hw {
                                    y.data[k] = p[gamma + ch] * (x.data[k] - mean) * inv + p[beta + ch];
                                }
                            }
                        }
                        (y, None)
                    }
                    Mode::Train => {
                        let mut cache = BnCache {
                            mean: vec![0.0; channels],
                            var: vec![0.0; channels],
                            inv_std: vec![0.0; channels],
                            xhat: vec![0.0; x.data.len()],
                        };
                        for ch in 0..channels {
                            let mut sum = 0.0;
                            for n in 0..x.n {
                                let base = (n * channels + ch) * hw;
                                sum += x.data[base..base + hw].iter().sum::<f64>();
                            }
                            let mean = sum / count as f64;
                            let mut sq = 0.0;
                            for n in 0..x.n {
                                let base = (n * channels + ch) * hw;
                                sq += x.data[base..base + hw]
                                    .iter()
                                    .map(|v| (v - mean) * (v - mean))
                                    .sum::<f64>();
                            }
                            let var = sq / count as f64;
                            let inv = 1.0 / (var + BN_EPS).sqrt();
                            cache.mean[ch] = mean;
                            cache.var[ch] = var;
                            cache.inv_std[ch] = inv;
                            for n in 0..x.n {
                                let base = (n * channels + ch) * hw;
                                for k in base..base + hw {
                                    let xh = (x.data[k] - mean) * inv;
                                    cache.xhat[k] = xh;
                                    y.data[k] = p[gamma + ch] * xh + p[beta + ch];
                                }
                            }
                        }
                        (y, Some(cache))
                    }
                }
            }
            Layer::LeakyRelu(slope) => (map(x, |v| if v > 0.0 { v } else { slope * v }), None),
            Layer::Relu => (map(x, |v| v.max(0.0)), None),
            Layer::Tanh => (map(x, f64::tanh), None),
            Layer::Sigmoid => (map(x, sigmoid), None),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_layer(
        &self,
        layer: &Layer,
        x: &Tensor,
        y: &Tensor,
        cache: Option<&BnCache>,
        mode: Mode,
        dy: &Tensor,
        grad: Option<&mut [f64]>,
    ) -> Tensor {
        let p = &self.params;
        match *layer {
            Layer::Linear {
                inputs,
                outputs,
                w,
                b,
            } => {
                let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
                for n in 0..x.n {
                    for o in 0..outputs {
                        let g = dy.data[n * outputs + o];
                        let row = &p[w + o * inputs..w + (o + 1) * inputs];
                        let dxs = &mut dx.data[n * inputs..(n + 1) * inputs];
                        for (d, wv) in dxs.iter_mut().zip(row) {
                            *d += g * wv;
                        }
                    }
                }
                if let Some(gr) = grad {
                    for n in 0..x.n {
                        let xs = x.sample(n);
                        for o in 0..outputs {
                            let g = dy.data[n * outputs + o];
                            gr[b + o] += g;
                            let grow = &mut gr[w + o * inputs..w + (o + 1) * inputs];
                            for (gw, xv) in grow.iter_mut().zip(xs) {
                                *gw += g * xv;
                            }
                        }
                    }
                }
                dx
            }
            Layer::Reshape { .. } => Tensor::from_vec(x.n, x.c, x.h, x.w, dy.data.clone()),
            Layer::Conv {
                cin,
                cout,
                kernel,
                stride,
                pad,
                w,
                b,
            } => {
                let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
                let mut gr = grad;
                for n in 0..x.n {
                    for co in 0..cout {
                        for oy in 0..dy.h {
                            for ox in 0..dy.w {
                                let g = dy.data[dy.idx(n, co, oy, ox)];
                                if let Some(gr) = gr.as_deref_mut() {
                                    gr[b + co] += g;
                                }
                                for ci in 0..cin {
                                    for ky in 0..kernel {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= x.h as isize {
                                            continue;
                                        }
                                        for kx in 0..kernel {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= x.w as isize {
                                                continue;
                                            }
                                            let wi = w + ((co * cin + ci) * kernel + ky) * kernel + kx;
                                            let xi = x.idx(n, ci, iy as usize, ix as usize);
                                            dx.data[xi] += g * p[wi];
                                            if let Some(gr) = gr.as_deref_mut() {
                                                gr[wi] += g * x.data[xi];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                dx
            }
            Layer::Deconv {
                cin,
                cout,
                kernel,
                stride,
                pad,
                w,
                b,
            } => {
                let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
                let mut gr = grad;
                if let Some(gr) = gr.as_deref_mut() {
                    for n in 0..dy.n {
                        for co in 0..cout {
                            let base = dy.idx(n, co, 0, 0);
                            gr[b + co] += dy.data[base..base + dy.h * dy.w].iter().sum::<f64>();
                        }
                    }
                }
                for n in 0..x.n {
                    for ci in 0..cin {
                        for iy in 0..x.h {
                            for ix in 0..x.w {
                                let xi = x.idx(n, ci, iy, ix);
                                let xv = x.data[xi];
                                let mut acc = 0.0;
                                for co in 0..cout {
                                    for ky in 0..kernel {
                                        let oy = (iy * stride + ky) as isize - pad as isize;
                                        if oy < 0 || oy >= dy.h as isize {
                                            continue;
                                        }
                                        for kx in 0..kernel {
                                            let ox = (ix * stride + kx) as isize - pad as isize;
                                            if ox < 0 || ox >= dy.w as isize {
                                                continue;
                                            }
                                            let wi = w + ((ci * cout + co) * kernel + ky) * kernel + kx;
                                            let g = dy.data[dy.idx(n, co, oy as usize, ox as usize)];
                                            acc += g * p[wi];
                                            if let Some(gr) = gr.as_deref_mut() {
                                                gr[wi] += g * xv;
                                            }
                                        }
                                    }
                                }
                                dx.data[xi] = acc;
                            }
                        }
                    }
                }
                dx
            }
            Layer::BatchNorm {
                channels,
                gamma,
                beta,
                running,
            } => {
                let hw = x.h * x.w;
                let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
                let mut gr = grad;
                match (mode, cache) {
                    (Mode::Train, Some(c)) => {
                        let count = (x.n * hw) as f64;
                        for ch in 0..channels {
                            let mut sum_dy = 0.0;
                            let mut sum_dy_xhat = 0.0;
                            for n in 0..x.n {
                                let base = (n * channels + ch) * hw;
                                for k in base..base + hw {
                                    sum_dy += dy.data[k];
                                    sum_dy_xhat += dy.data[k] * c.xhat[k];
                                }
                            }
                            if let Some(gr) = gr.as_deref_mut() {
                                gr[gamma + ch] += sum_dy_xhat;
                                gr[beta + ch] += sum_dy;
                            }
                            let scale = p[gamma + ch] * c.inv_std[ch] / count;
                            for n in 0..x.n {
                                let base = (n * channels + ch) * hw;
                                for k in base..base + hw {
                                    dx.data[k] = scale
                                        * (count * dy.data[k] - sum_dy - c.xhat[k] * sum_dy_xhat);
                                }
                            }
                        }
                    }
                    _ => {
                        for ch in 0..channels {
                            let mean = self.state[running + ch];
                            let inv = 1.0 / (self.state[running + channels + ch] + BN_EPS).sqrt();
                            for n in 0..x.n {
                                let base = (n * channels + ch) * hw;
                                for k in base..base + hw {
                                    dx.data[k] = dy.data[k] * p[gamma + ch] * inv;
                                    if let Some(gr) = gr.as_deref_mut() {
                                        gr[gamma + ch] += dy.data[k] * (x.data[k] - mean) * inv;
                                        gr[beta + ch] += dy.data[k];
                                    }
                                }
                            }
                        }
                    }
                }
                dx
            }
            Layer::LeakyRelu(slope) => zip_map(x, dy, |xv, g| if xv > 0.0 { g } else { slope * g }),
            Layer::Relu => zip_map(x, dy, |xv, g| if xv > 0.0 { g } else { 0.0 }),
            Layer::Tanh => zip_map(y, dy, |yv, g| g * (1.0 - yv * yv)),
            Layer::Sigmoid => zip_map(y, dy, |yv, g| g * yv * (1.0 - yv)),
        }
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_vec(x.n, x.c, x.h, x.w, x.data.iter().map(|&v| f(v)).collect())
}

fn zip_map(a: &Tensor, g: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_vec(
        a.n,
        a.c,
        a.h,
        a.w,
        a.data.iter().zip(&g.data).map(|(&x, &d)| f(x, d)).collect(),
    )
}

/// Allocates parameters and builds a [`Network`] layer by layer.
pub struct NetBuilder<'r, R: Rng> {
    layers: Vec<Layer>,
    params: Vec<f64>,
    state: Vec<f64>,
    rng: &'r mut R,
}

const INIT_STD: f64 = 0.02;

impl<'r, R: Rng> NetBuilder<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Self {
            layers: Vec::new(),
            params: Vec::new(),
            state: Vec::new(),
            rng,
        }
    }

    fn alloc_normal(&mut self, count: usize, mean: f64) -> usize {
        let off = self.params.len();
        let dist = Normal::new(mean, INIT_STD).expect("valid normal");
        for _ in 0..count {
            let v = dist.sample(self.rng);
            self.params.push(v);
        }
        off
    }

    fn alloc_zeros(&mut self, count: usize) -> usize {
        let off = self.params.len();
        self.params.resize(off + count, 0.0);
        off
    }

    pub fn linear(mut self, inputs: usize, outputs: usize) -> Self {
        let w = self.alloc_normal(inputs * outputs, 0.0);
        let b = self.alloc_zeros(outputs);
        self.layers.push(Layer::Linear {
            inputs,
            outputs,
            w,
            b,
        });
        self
    }

    pub fn reshape(mut self, c: usize, h: usize, w: usize) -> Self {
        self.layers.push(Layer::Reshape { c, h, w });
        self
    }

    pub fn conv(mut self, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        let w = self.alloc_normal(cout * cin * kernel * kernel, 0.0);
        let b = self.alloc_zeros(cout);
        self.layers.push(Layer::Conv {
            cin,
            cout,
            kernel,
            stride,
            pad,
            w,
            b,
        });
        self
    }

    pub fn deconv(mut self, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        let w = self.alloc_normal(cin * cout * kernel * kernel, 0.0);
        let b = self.alloc_zeros(cout);
        self.layers.push(Layer::Deconv {
            cin,
            cout,
            kernel,
            stride,
            pad,
            w,
            b,
        });
        self
    }

    pub fn batch_norm(mut self, channels: usize) -> Self {
        let gamma = self.alloc_normal(channels, 1.0);
        let beta = self.alloc_zeros(channels);
        let running = self.state.len();
        self.state.extend(std::iter::repeat_n(0.0, channels));
        self.state.extend(std::iter::repeat_n(1.0, channels));
        self.layers.push(Layer::BatchNorm {
            channels,
            gamma,
            beta,
            running,
        });
        self
    }

    pub fn leaky_relu(mut self, slope: f64) -> Self {
        self.layers.push(Layer::LeakyRelu(slope));
        self
    }

    pub fn relu(mut self) -> Self {
        self.layers.push(Layer::Relu);
        self
    }

    pub fn tanh(mut self) -> Self {
        self.layers.push(Layer::Tanh);
        self
    }

    pub fn sigmoid(mut self) -> Self {
        self.layers.push(Layer::Sigmoid);
        self
    }

    pub fn build(self) -> Network {
        Network {
            layers: self.layers,
            params: self.params,
            state: self.state,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor {
        let data = (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(n, c, h, w, data)
    }

    /// Central-difference check of d(sum(out * proj))/d(param) and /d(input).
    fn check_network(net: &mut Network, x: &Tensor, mode: Mode) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let out = net.forward(x, mode);
        let proj = random_tensor(&mut rng, out.output().n, out.output().c, out.output().h, out.output().w);
        let objective = |net: &Network, x: &Tensor| -> f64 {
            let y = net.forward(x, mode);
            y.output().data.iter().zip(&proj.data).map(|(a, b)| a * b).sum()
        };
        let mut grad = vec![0.0; net.param_count()];
        let dx = net.backward(&out, &proj, Some(&mut grad));
        let h = 1e-5;
        for i in 0..net.param_count() {
            let orig = net.params[i];
            net.params[i] = orig + h;
            let up = objective(net, x);
            net.params[i] = orig - h;
            let down = objective(net, x);
            net.params[i] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "param {i}: fd {fd} vs analytic {}",
                grad[i]
            );
        }
        let mut xp = x.clone();
        for i in 0..x.data.len() {
            let orig = xp.data[i];
            xp.data[i] = orig + h;
            let up = objective(net, &xp);
            xp.data[i] = orig - h;
            let down = objective(net, &xp);
            xp.data[i] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - dx.data[i]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "input {i}: fd {fd} vs analytic {}",
                dx.data[i]
            );
        }
    }

    #[test]
    fn conv_stack_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = NetBuilder::new(&mut rng)
            .conv(2, 3, 4, 2, 1)
            .batch_norm(3)
            .leaky_relu(0.2)
            .conv(3, 2, 4, 2, 1)
            .sigmoid()
            .build();
        let x = random_tensor(&mut rng, 3, 2, 4, 4);
        check_network(&mut net, &x, Mode::Train);
        check_network(&mut net, &x, Mode::Eval);
    }

    #[test]
    fn deconv_stack_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = NetBuilder::new(&mut rng)
            .linear(5, 2 * 4 * 4)
            .reshape(2, 4, 4)
            .batch_norm(2)
            .relu()
            .deconv(2, 1, 4, 2, 1)
            .tanh()
            .build();
        // Larger weights keep the check away from vanishing gradients.
        for p in net.params_mut() {
            *p *= 20.0;
        }
        let x = random_tensor(&mut rng, 4, 5, 1, 1);
        check_network(&mut net, &x, Mode::Train);
    }

    #[test]
    fn shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = NetBuilder::new(&mut rng)
            .deconv(3, 1, 4, 2, 1)
            .conv(1, 4, 4, 2, 1)
            .conv(4, 1, 1, 1, 0)
            .build();
        let x = random_tensor(&mut rng, 2, 3, 4, 4);
        let t = net.forward(&x, Mode::Eval);
        assert_eq!((t.acts[1].h, t.acts[1].w), (8, 8));
        assert_eq!((t.acts[2].c, t.acts[2].h), (4, 4));
        assert_eq!(t.output().c, 1);
    }

    #[test]
    fn running_stats_move_toward_batch_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = NetBuilder::new(&mut rng).batch_norm(1).build();
        let x = Tensor::from_vec(4, 1, 1, 1, vec![1.0, 2.0, 3.0, 4.0]);
        let t = net.forward(&x, Mode::Train);
        net.update_running_stats(&t);
        assert!((net.state()[0] - 0.25).abs() < 1e-12);
        // unbiased var of {1,2,3,4} is 5/3
        assert!((net.state()[1] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }
}
