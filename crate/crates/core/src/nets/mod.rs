//! Generator, discriminator and classifier networks.
//!
//! The generator projects a latent vector to a 4x4 map and doubles the side
//! with stride-2 transposed convolutions until it reaches the matrix side,
//! ending in `tanh`. The discriminator and the classifier share one
//! architecture: stride-2 convolutions halve the side down to 1, the
//! resulting flattened activations are the feature vector, and a single
//! linear unit plus sigmoid gives the probability.

mod layers;
mod tensor;

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use layers::{sigmoid, Layer, Mode, NetBuilder, Network, Trace};
pub use tensor::Tensor;

use crate::codec::{MatrixBatch, MatrixLayout};
use crate::error::{Error, Result};
use crate::schema::TableSchema;

const KERNEL: usize = 4;
const STRIDE: usize = 2;
const PAD: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub latent_dim: usize,
    pub base_filters: usize,
    pub leaky_slope: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            latent_dim: 100,
            base_filters: 16,
            leaky_slope: 0.2,
        }
    }
}

/// `n` latent vectors of dimension `k`, components in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    k: usize,
    data: Vec<f64>,
}

impl LatentBatch {
    pub fn new(k: usize, data: Vec<f64>) -> Result<Self> {
        if k == 0 || data.len() % k != 0 {
            return Err(Error::Shape(format!(
                "{} values do not form whole latent vectors of dimension {k}",
                data.len()
            )));
        }
        Ok(Self { k, data })
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.len(), self.k, 1, 1, self.data.clone())
    }
}

/// Draws `n` latent vectors uniformly from the unit hypercube.
pub fn sample_latent(n: usize, k: usize, seed: u64) -> LatentBatch {
    sample_latent_with(n, k, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn sample_latent_with<R: Rng>(n: usize, k: usize, rng: &mut R) -> LatentBatch {
    let data = (0..n * k).map(|_| rng.random_range(-1.0..=1.0)).collect();
    LatentBatch { k, data }
}

fn doublings(side: usize) -> Result<usize> {
    match side {
        4 => Ok(0),
        8 => Ok(1),
        16 => Ok(2),
        32 => Ok(3),
        _ => Err(Error::InvalidArgument(format!(
            "unsupported matrix side {side}; expected 4, 8, 16 or 32"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    net: Network,
    latent_dim: usize,
    side: usize,
}

impl Generator {
    pub fn new<R: Rng>(side: usize, cfg: &NetConfig, rng: &mut R) -> Result<Self> {
        let ups = doublings(side)?;
        if cfg.latent_dim == 0 || cfg.base_filters == 0 {
            return Err(Error::InvalidArgument(
                "latent dimension and base filter count must be positive".into(),
            ));
        }
        // Mirror the discriminator: the 4x4 map has as many channels as the
        // discriminator's last convolution.
        let mut ch = cfg.base_filters << (ups + 1);
        let mut b = NetBuilder::new(rng)
            .linear(cfg.latent_dim, ch * 16)
            .reshape(ch, 4, 4)
            .batch_norm(ch)
            .relu();
        if ups == 0 {
            b = b.conv(ch, 1, 1, 1, 0);
        } else {
            for _ in 1..ups {
                b = b
                    .deconv(ch, ch / 2, KERNEL, STRIDE, PAD)
                    .batch_norm(ch / 2)
                    .relu();
                ch /= 2;
            }
            b = b.deconv(ch, 1, KERNEL, STRIDE, PAD);
        }
        Ok(Self {
            net: b.tanh().build(),
            latent_dim: cfg.latent_dim,
            side,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    /// Number of stride-2 doubling layers after the 4x4 projection.
    pub fn doubling_layers(&self) -> usize {
        self.net
            .layers()
            .iter()
            .filter(|l| matches!(l, Layer::Deconv { stride: 2, .. }))
            .count()
    }

    pub fn forward(&self, z: &LatentBatch, mode: Mode) -> Result<Trace> {
        if z.dim() != self.latent_dim {
            return Err(Error::Shape(format!(
                "latent dimension {} does not match generator's {}",
                z.dim(),
                self.latent_dim
            )));
        }
        Ok(self.net.forward(&z.to_tensor(), mode))
    }

    /// Inference-mode generation.
    pub fn generate(&self, z: &LatentBatch, layout: &MatrixLayout) -> Result<MatrixBatch> {
        if layout.side() != self.side {
            return Err(Error::Shape(format!(
                "layout side {} does not match generator side {}",
                layout.side(),
                self.side
            )));
        }
        let trace = self.forward(z, Mode::Eval)?;
        MatrixBatch::new(layout.clone(), trace.output().data.clone())
    }
}

/// Counts forward passes; clones start from the same count.
#[derive(Debug, Default)]
pub struct AccessCounter(AtomicUsize);

impl AccessCounter {
    pub fn get(&self) -> usize {
        self.0.load(Ordering::Relaxed)
    }

    fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

impl Clone for AccessCounter {
    fn clone(&self) -> Self {
        Self(AtomicUsize::new(self.get()))
    }
}

impl PartialEq for AccessCounter {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

/// Probability network used both as discriminator and as classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Critic {
    net: Network,
    side: usize,
    #[serde(skip)]
    calls: AccessCounter,
}

/// Result of one critic forward pass.
pub struct CriticPass {
    trace: Trace,
    feature_act: usize,
}

impl CriticPass {
    pub fn probabilities(&self) -> &[f64] {
        &self.trace.output().data
    }

    /// Flattened activations feeding the final linear unit, `[n, f, 1, 1]`.
    pub fn features(&self) -> &Tensor {
        &self.trace.acts[self.feature_act]
    }

    pub fn feature_vectors(&self) -> Vec<Vec<f64>> {
        let f = self.features();
        (0..f.n).map(|i| f.sample(i).to_vec()).collect()
    }
}

impl Critic {
    pub fn new<R: Rng>(side: usize, cfg: &NetConfig, rng: &mut R) -> Result<Self> {
        let downs = doublings(side)? + 2;
        if cfg.base_filters == 0 {
            return Err(Error::InvalidArgument("base filter count must be positive".into()));
        }
        let mut b = NetBuilder::new(rng)
            .conv(1, cfg.base_filters, KERNEL, STRIDE, PAD)
            .leaky_relu(cfg.leaky_slope);
        let mut ch = cfg.base_filters;
        for _ in 1..downs {
            b = b
                .conv(ch, ch * 2, KERNEL, STRIDE, PAD)
                .batch_norm(ch * 2)
                .leaky_relu(cfg.leaky_slope);
            ch *= 2;
        }
        Ok(Self {
            net: b.linear(ch, 1).sigmoid().build(),
            side,
            calls: AccessCounter::default(),
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn feature_dim(&self) -> usize {
        match self.net.layers()[self.net.layers().len() - 2] {
            Layer::Linear { inputs, .. } => inputs,
            _ => unreachable!("critic ends with linear + sigmoid"),
        }
    }

    pub fn signature(&self) -> String {
        self.net.signature()
    }

    /// Number of forward passes run through this network.
    pub fn access_count(&self) -> usize {
        self.calls.get()
    }

    pub fn reset_access_count(&self) {
        self.calls.reset()
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<CriticPass> {
        if x.c != 1 || x.h != self.side || x.w != self.side {
            return Err(Error::Shape(format!(
                "critic expects 1x{s}x{s} inputs, got {}x{}x{}",
                x.c,
                x.h,
                x.w,
                s = self.side
            )));
        }
        self.calls.bump();
        let trace = self.net.forward(x, mode);
        let feature_act = trace.acts.len() - 3;
        Ok(CriticPass { trace, feature_act })
    }

    /// Gradient w.r.t. the critic input given upstream gradients on the
    /// probabilities and (optionally) on the features.
    pub fn backward(
        &self,
        pass: &CriticPass,
        d_prob: &[f64],
        d_features: Option<&Tensor>,
        grad: Option<&mut [f64]>,
    ) -> Tensor {
        let out = pass.trace.output();
        let dy = Tensor::from_vec(out.n, out.c, out.h, out.w, d_prob.to_vec());
        let taps: Vec<(usize, &Tensor)> = d_features.map(|g| (pass.feature_act, g)).into_iter().collect();
        self.net.backward_tapped(&pass.trace, &dy, &taps, grad)
    }

    pub fn update_running_stats(&mut self, pass: &CriticPass) {
        self.net.update_running_stats(&pass.trace)
    }

    /// Inference-mode probabilities and feature vectors.
    pub fn discriminate(&self, x: &MatrixBatch) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let pass = self.forward(&batch_tensor(x), Mode::Eval)?;
        Ok((pass.probabilities().to_vec(), pass.feature_vectors()))
    }

    /// Inference-mode probabilities only.
    pub fn classify(&self, x: &MatrixBatch) -> Result<Vec<f64>> {
        let pass = self.forward(&batch_tensor(x), Mode::Eval)?;
        Ok(pass.probabilities().to_vec())
    }
}

pub fn batch_tensor(x: &MatrixBatch) -> Tensor {
    let d = x.layout().side();
    Tensor::from_vec(x.len(), 1, d, d, x.data().to_vec())
}

/// Builds generator, discriminator and classifier for `layout`.
pub fn build_networks<R: Rng>(
    layout: &MatrixLayout,
    cfg: &NetConfig,
    rng: &mut R,
) -> Result<(Generator, Critic, Critic)> {
    let g = Generator::new(layout.side(), cfg, rng)?;
    let d = Critic::new(layout.side(), cfg, rng)?;
    let c = Critic::new(layout.side(), cfg, rng)?;
    Ok((g, d, c))
}

/// Zeroes the label cell of every matrix in a `[n, 1, d, d]` tensor.
pub fn mask_label_tensor(x: &mut Tensor, label_offset: usize) {
    let s = x.sample_len();
    for i in 0..x.n {
        x.data[i * s + label_offset] = 0.0;
    }
}

pub fn mask_label(x: &MatrixBatch, schema: &TableSchema) -> MatrixBatch {
    let off = x.layout().offset_of_attribute(schema.label_index());
    let cells = x.layout().cells();
    let mut data = x.data().to_vec();
    for m in data.chunks_mut(cells) {
        m[off] = 0.0;
    }
    MatrixBatch::new(x.layout().clone(), data).expect("same shape")
}

/// Label cell mapped from [-1, 1] onto [0, 1].
pub fn label_of(x: &MatrixBatch, schema: &TableSchema) -> Vec<f64> {
    let off = x.layout().offset_of_attribute(schema.label_index());
    (0..x.len()).map(|i| (x.matrix(i)[off] + 1.0) / 2.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{ColumnDecl, ColumnKind};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn generator_doubling_layers() {
        let cfg = NetConfig::default();
        assert_eq!(Generator::new(16, &cfg, &mut rng()).unwrap().doubling_layers(), 2);
        assert_eq!(Generator::new(8, &cfg, &mut rng()).unwrap().doubling_layers(), 1);
        assert_eq!(Generator::new(4, &cfg, &mut rng()).unwrap().doubling_layers(), 0);
        assert!(Generator::new(6, &cfg, &mut rng()).is_err());
        assert!(Generator::new(64, &cfg, &mut rng()).is_err());
    }

    #[test]
    fn discriminator_and_classifier_share_architecture() {
        for side in [4, 8, 16, 32] {
            let layout = MatrixLayout::for_attributes(side * side).unwrap();
            let (_, d, c) = build_networks(&layout, &NetConfig::default(), &mut rng()).unwrap();
            assert_eq!(d.signature(), c.signature());
            assert_ne!(d.network().params(), c.network().params());
        }
    }

    #[test]
    fn latent_sampling() {
        assert!(sample_latent(0, 7, 1).is_empty());
        let z = sample_latent(500, 3, 1);
        assert!(z.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(z, sample_latent(500, 3, 1));
        assert_ne!(z, sample_latent(500, 3, 2));
    }

    #[test]
    fn latent_mean_is_near_zero() {
        let k = 4;
        let z = sample_latent(1_000_000 / k * k, k, 11);
        for d in 0..k {
            let mean: f64 =
                z.data().iter().skip(d).step_by(k).sum::<f64>() / z.len() as f64;
            assert!(mean.abs() < 0.01, "dimension {d} mean {mean}");
        }
    }

    #[test]
    fn generator_output_bounded_and_deterministic() {
        let layout = MatrixLayout::for_attributes(40).unwrap();
        let mut g = Generator::new(layout.side(), &NetConfig::default(), &mut rng()).unwrap();
        // Blow the weights up to push tanh into saturation.
        for p in g.network_mut().params_mut() {
            *p *= 50.0;
        }
        let z = sample_latent(1000, 100, 3);
        let x = g.generate(&z, &layout).unwrap();
        assert_eq!(x.len(), 1000);
        assert!(x.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(x, g.generate(&z, &layout).unwrap());
        let one = g.generate(&sample_latent(1, 100, 3), &layout).unwrap();
        assert_eq!(one.len(), 1);
        assert!(g.generate(&sample_latent(2, 99, 3), &layout).is_err());
    }

    #[test]
    fn discriminate_shapes_and_determinism() {
        let layout = MatrixLayout::for_attributes(16).unwrap();
        let (g, d, _) = build_networks(&layout, &NetConfig::default(), &mut rng()).unwrap();
        let x = g.generate(&sample_latent(9, 100, 1), &layout).unwrap();
        let (p, f) = d.discriminate(&x).unwrap();
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(f.len(), 9);
        assert!(f.iter().all(|v| v.len() == d.feature_dim()));
        let (p2, f2) = d.discriminate(&x).unwrap();
        assert_eq!((p, f), (p2, f2));
        let (_, f3) = d
            .discriminate(&g.generate(&sample_latent(2, 100, 7), &layout).unwrap())
            .unwrap();
        assert_eq!(f3[0].len(), d.feature_dim());
        let wrong = MatrixBatch::new(MatrixLayout::for_attributes(20).unwrap(), vec![0.0; 64]).unwrap();
        assert!(d.discriminate(&wrong).is_err());
    }

    #[test]
    fn access_counter_counts_forwards() {
        let layout = MatrixLayout::for_attributes(16).unwrap();
        let (_, d, _) = build_networks(&layout, &NetConfig::default(), &mut rng()).unwrap();
        let x = MatrixBatch::new(layout, vec![0.0; 32]).unwrap();
        assert_eq!(d.access_count(), 0);
        d.discriminate(&x).unwrap();
        d.classify(&x).unwrap();
        assert_eq!(d.access_count(), 2);
    }

    fn label_schema() -> TableSchema {
        let h = ["a", "b", "y"];
        let d = vec![
            ColumnDecl::new("a", ColumnKind::Continuous).range(0.0, 1.0),
            ColumnDecl::new("b", ColumnKind::Continuous).range(0.0, 1.0),
            ColumnDecl::new("y", ColumnKind::Label),
        ];
        TableSchema::build(&h, &d, &[]).unwrap()
    }

    #[test]
    fn masking_and_label_reading() {
        let s = label_schema();
        let layout = MatrixLayout::for_attributes(3).unwrap();
        let mut data = vec![0.0; 32];
        data[..3].copy_from_slice(&[0.1, -0.4, 0.7]);
        data[16..19].copy_from_slice(&[0.5, 0.5, -1.0]);
        data[2] = 0.7;
        let x = MatrixBatch::new(layout.clone(), data).unwrap();
        let m = mask_label(&x, &s);
        assert_eq!(m.matrix(0)[2], 0.0);
        for i in 0..32 {
            if i % 16 != 2 {
                assert_eq!(m.data()[i], x.data()[i]);
            }
        }
        assert_eq!(mask_label(&m, &s), m);
        let labels = label_of(&x, &s);
        assert!((labels[0] - 0.85).abs() < 1e-12);
        assert_eq!(labels[1], 0.0);

        let one = MatrixBatch::new(layout.clone(), {
            let mut v = vec![0.0; 16];
            v[2] = 1.0;
            v
        })
        .unwrap();
        assert_eq!(label_of(&one, &s), vec![1.0]);
        let fifth = MatrixBatch::new(layout, {
            let mut v = vec![0.0; 16];
            v[2] = 0.2;
            v
        })
        .unwrap();
        assert!((label_of(&fifth, &s)[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn masked_decode_differs_only_in_label() {
        let s = label_schema();
        let layout = MatrixLayout::for_attributes(3).unwrap();
        let mut v = vec![0.0; 16];
        v[..3].copy_from_slice(&[0.2, -0.6, -1.0]);
        let x = MatrixBatch::new(layout.clone(), v).unwrap();
        let a = crate::codec::decode_matrix(x.matrix(0), &s, &layout).unwrap();
        let b = crate::codec::decode_matrix(mask_label(&x, &s).matrix(0), &s, &layout).unwrap();
        assert_eq!(a[..2], b[..2]);
        assert_ne!(a[2], b[2]);
    }
}
