//! Adversarial training loop and synthesis.
//!
//! Per mini-batch, in order: one discriminator step on the adversarial loss,
//! one classifier step on real records, moving-average updates of the four
//! feature-statistic vectors, and one generator step on the weighted sum of
//! the adversarial, information and classification losses. The information
//! loss compares the moving averages, with gradient flowing only through the
//! current synthetic batch's share of them.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{decode_batch, encode_table, MatrixBatch, MatrixLayout};
use crate::error::{Error, Result};
use crate::losses::{
    self, BatchFeatureStats, ClassLossKind, GeneratorLossMode, LossValues, PrivacyConfig,
};
use crate::nets::{
    build_networks, mask_label_tensor, sample_latent, sample_latent_with, Critic, CriticPass,
    Generator, LatentBatch, Mode, NetConfig, Tensor,
};
use crate::optim::Adam;
use crate::schema::TableSchema;
use crate::table::RawTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub privacy: PrivacyConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Moving-average weight on the previous statistic.
    pub ewma_weight: f64,
    pub seed: u64,
    pub generator_loss_mode: GeneratorLossMode,
    pub class_loss: ClassLossKind,
    /// Weights of the adversarial, information and classification terms of
    /// the generator loss.
    pub loss_weights: [f64; 3],
    /// Per-component gradient clipping; off by default.
    pub grad_clip: Option<f64>,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            privacy: PrivacyConfig::default(),
            epochs: 25,
            batch_size: 64,
            learning_rate: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            ewma_weight: 0.99,
            seed: 0,
            generator_loss_mode: GeneratorLossMode::default(),
            class_loss: ClassLossKind::default(),
            loss_weights: [1.0, 1.0, 1.0],
            grad_clip: None,
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch size {} < 2", self.batch_size));
        }
        if !(self.ewma_weight > 0.0 && self.ewma_weight < 1.0) {
            return bad(format!("moving-average weight {} not in (0, 1)", self.ewma_weight));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if self.loss_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return bad("loss weights must be finite and non-negative".into());
        }
        PrivacyConfig::new(self.privacy.delta_mean, self.privacy.delta_sd)?;
        Ok(())
    }
}

/// Moving averages of the discriminator-feature mean and sd for real (X)
/// and synthetic (Z) records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EwmaState {
    pub mean_x: Vec<f64>,
    pub sd_x: Vec<f64>,
    pub mean_z: Vec<f64>,
    pub sd_z: Vec<f64>,
}

impl EwmaState {
    pub fn zeros(dim: usize) -> Self {
        Self {
            mean_x: vec![0.0; dim],
            sd_x: vec![0.0; dim],
            mean_z: vec![0.0; dim],
            sd_z: vec![0.0; dim],
        }
    }

    pub fn real_stats(&self) -> BatchFeatureStats {
        BatchFeatureStats {
            mean: self.mean_x.clone(),
            sd: self.sd_x.clone(),
        }
    }

    pub fn fake_stats(&self) -> BatchFeatureStats {
        BatchFeatureStats {
            mean: self.mean_z.clone(),
            sd: self.sd_z.clone(),
        }
    }
}

/// `w * state + (1 - w) * batch`.
pub fn ewma_update(state: &[f64], batch: &[f64], w: f64) -> Result<Vec<f64>> {
    if state.len() != batch.len() {
        return Err(Error::Shape(format!(
            "moving average of dimension {} updated with {}",
            state.len(),
            batch.len()
        )));
    }
    Ok(state.iter().zip(batch).map(|(s, b)| w * s + (1.0 - w) * b).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainEvent {
    DiscriminatorStep,
    ClassifierStep,
    EwmaUpdate,
    GeneratorStep,
}

/// Hooks into the training loop.
pub trait TrainObserver {
    fn on_event(&mut self, _epoch: usize, _batch: usize, _event: TrainEvent) {}

    /// Called after every epoch with a snapshot of the model when
    /// [`TrainObserver::wants_snapshots`] is true.
    fn on_epoch_end(&mut self, _epoch: usize, _losses: &LossValues, _snapshot: Option<&TrainedModel>) -> Result<()> {
        Ok(())
    }

    fn wants_snapshots(&self) -> bool {
        false
    }
}

/// Observer that does nothing.
pub struct Silent;

impl TrainObserver for Silent {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub generator: Generator,
    pub discriminator: Critic,
    pub classifier: Critic,
    pub schema: TableSchema,
    pub layout: MatrixLayout,
    pub config: TrainConfig,
    pub ewma: EwmaState,
    /// Mean loss values per epoch.
    pub history: Vec<LossValues>,
    /// Rows in the training table; default synthesis size.
    pub train_rows: usize,
}

impl TrainedModel {
    /// Writes the per-epoch loss history as CSV.
    pub fn write_history_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        let mut header = vec!["epoch".to_string()];
        header.extend(LossValues::NAMES.iter().map(|s| s.to_string()));
        w.write_record(&header)?;
        for (i, l) in self.history.iter().enumerate() {
            let mut rec = vec![(i + 1).to_string()];
            rec.extend(l.as_array().iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<history writer>", e))?;
        Ok(())
    }
}

/// Loss terms and gradient of the generator objective for one batch.
pub struct GeneratorObjective {
    pub total: f64,
    pub g_orig: f64,
    pub l_mean: f64,
    pub l_sd: f64,
    pub g_info: f64,
    pub g_class: f64,
    /// Moving averages after folding in this batch's statistics.
    pub ewma: EwmaState,
    /// Gradient w.r.t. the generator parameters.
    pub grad: Vec<f64>,
    pub(crate) trace: crate::nets::Trace,
}

/// Evaluates the weighted generator loss on latent batch `z` and
/// back-propagates it into the generator's parameters.
///
/// `real_stats` are the current real-record feature statistics of the batch;
/// `prev` holds the moving averages before this batch. The discriminator,
/// classifier and generator all run in training mode.
pub fn generator_objective(
    generator: &Generator,
    discriminator: &Critic,
    classifier: &Critic,
    z: &LatentBatch,
    real_stats: &BatchFeatureStats,
    prev: &EwmaState,
    label_offset: usize,
    cfg: &TrainConfig,
) -> Result<GeneratorObjective> {
    let w = cfg.ewma_weight;
    let [w_orig, w_info, w_class] = cfg.loss_weights;

    let trace = generator.forward(z, Mode::Train)?;
    let fake = trace.output().clone();
    let n = fake.n;

    let pass = discriminator.forward(&fake, Mode::Train)?;
    let probs = pass.probabilities().to_vec();
    let g_orig = losses::orig_loss_g(&probs, cfg.generator_loss_mode)?;
    let feats = pass.feature_vectors();
    let fake_stats = losses::feature_stats(&feats)?;

    let ewma = EwmaState {
        mean_x: ewma_update(&prev.mean_x, &real_stats.mean, w)?,
        sd_x: ewma_update(&prev.sd_x, &real_stats.sd, w)?,
        mean_z: ewma_update(&prev.mean_z, &fake_stats.mean, w)?,
        sd_z: ewma_update(&prev.sd_z, &fake_stats.sd, w)?,
    };
    let global_real = ewma.real_stats();
    let global_fake = ewma.fake_stats();
    let info = losses::info_loss(&global_real, &global_fake, &cfg.privacy)?;

    // Adversarial + information gradients through the discriminator.
    let d_prob: Vec<f64> = losses::orig_loss_g_grad(&probs, cfg.generator_loss_mode)
        .into_iter()
        .map(|g| g * w_orig)
        .collect();
    let (dm, ds) = losses::info_loss_grad(&global_real, &global_fake, &info, &cfg.privacy);
    let scale = w_info * (1.0 - w);
    let dm: Vec<f64> = dm.iter().map(|g| g * scale).collect();
    let ds: Vec<f64> = ds.iter().map(|g| g * scale).collect();
    let d_feats = losses::feature_stats_backward(&feats, &fake_stats, &dm, &ds);
    let f = pass.features();
    let d_feat_tensor = Tensor::from_vec(f.n, f.c, f.h, f.w, d_feats.concat());
    let mut d_fake = discriminator.backward(&pass, &d_prob, Some(&d_feat_tensor), None);

    // Classification gradient: through the classifier on the masked record
    // and directly through the label cell.
    let mut masked = fake.clone();
    mask_label_tensor(&mut masked, label_offset);
    let cpass = classifier.forward(&masked, Mode::Train)?;
    let preds = cpass.probabilities().to_vec();
    let s = fake.sample_len();
    let labels: Vec<f64> = (0..n).map(|i| (fake.data[i * s + label_offset] + 1.0) / 2.0).collect();
    let g_class = losses::class_loss_with(&labels, &preds, cfg.class_loss)?;
    if w_class != 0.0 {
        let (d_label, d_pred) = losses::class_loss_grad(&labels, &preds, cfg.class_loss);
        let d_pred: Vec<f64> = d_pred.iter().map(|g| g * w_class).collect();
        let mut d_masked = classifier.backward(&cpass, &d_pred, None, None);
        mask_label_tensor(&mut d_masked, label_offset);
        d_fake.add_assign(&d_masked);
        for (i, dl) in d_label.iter().enumerate() {
            d_fake.data[i * s + label_offset] += w_class * dl * 0.5;
        }
    }

    let mut grad = vec![0.0; generator.network().param_count()];
    generator.network().backward(&trace, &d_fake, Some(&mut grad));

    Ok(GeneratorObjective {
        total: w_orig * g_orig + w_info * info.g_info + w_class * g_class,
        g_orig,
        l_mean: info.l_mean,
        l_sd: info.l_sd,
        g_info: info.g_info,
        g_class,
        ewma,
        grad,
        trace,
    })
}

struct Session {
    generator: Generator,
    discriminator: Critic,
    classifier: Critic,
    opt_g: Adam,
    opt_d: Adam,
    opt_c: Adam,
    ewma: EwmaState,
    rng: ChaCha8Rng,
    label_offset: usize,
}

impl Session {
    fn step(
        &mut self,
        real: &Tensor,
        cfg: &TrainConfig,
        epoch: usize,
        batch: usize,
        obs: &mut dyn TrainObserver,
    ) -> Result<LossValues> {
        let n = real.n;
        let z = sample_latent_with(n, self.generator.latent_dim(), &mut self.rng);

        // Discriminator.
        let fake = self.generator.forward(&z, Mode::Train)?.output().clone();
        let pr = self.discriminator.forward(real, Mode::Train)?;
        let pf = self.discriminator.forward(&fake, Mode::Train)?;
        let d_orig = losses::orig_loss_d(pr.probabilities(), pf.probabilities())?;
        let (dr, df) = losses::orig_loss_d_grad(pr.probabilities(), pf.probabilities());
        let mut grad = vec![0.0; self.discriminator.network().param_count()];
        self.discriminator.backward(&pr, &dr, None, Some(&mut grad));
        self.discriminator.backward(&pf, &df, None, Some(&mut grad));
        self.opt_d
            .step(self.discriminator.network_mut().params_mut(), &grad, cfg.grad_clip);
        self.discriminator.update_running_stats(&pr);
        self.discriminator.update_running_stats(&pf);
        obs.on_event(epoch, batch, TrainEvent::DiscriminatorStep);

        // Classifier on real records.
        let mut masked = real.clone();
        mask_label_tensor(&mut masked, self.label_offset);
        let s = real.sample_len();
        let labels: Vec<f64> = (0..n)
            .map(|i| (real.data[i * s + self.label_offset] + 1.0) / 2.0)
            .collect();
        let pc = self.classifier.forward(&masked, Mode::Train)?;
        let c_class = losses::class_loss_with(&labels, pc.probabilities(), cfg.class_loss)?;
        let (_, dp) = losses::class_loss_grad(&labels, pc.probabilities(), cfg.class_loss);
        let mut grad = vec![0.0; self.classifier.network().param_count()];
        self.classifier.backward(&pc, &dp, None, Some(&mut grad));
        self.opt_c
            .step(self.classifier.network_mut().params_mut(), &grad, cfg.grad_clip);
        self.classifier.update_running_stats(&pc);
        obs.on_event(epoch, batch, TrainEvent::ClassifierStep);

        // Moving averages (from the updated discriminator) and generator.
        let real_pass: CriticPass = self.discriminator.forward(real, Mode::Train)?;
        let real_stats = losses::feature_stats(&real_pass.feature_vectors())?;
        let obj = generator_objective(
            &self.generator,
            &self.discriminator,
            &self.classifier,
            &z,
            &real_stats,
            &self.ewma,
            self.label_offset,
            cfg,
        )?;
        self.ewma = obj.ewma.clone();
        obs.on_event(epoch, batch, TrainEvent::EwmaUpdate);
        self.opt_g
            .step(self.generator.network_mut().params_mut(), &obj.grad, cfg.grad_clip);
        self.generator.network_mut().update_running_stats(&obj.trace);
        obs.on_event(epoch, batch, TrainEvent::GeneratorStep);

        Ok(LossValues {
            d_orig,
            g_orig: obj.g_orig,
            l_mean: obj.l_mean,
            l_sd: obj.l_sd,
            g_info: obj.g_info,
            c_class,
            g_class: obj.g_class,
        })
    }
}

pub fn train(table: &RawTable, cfg: &TrainConfig) -> Result<TrainedModel> {
    train_with(table, cfg, &mut Silent)
}

pub fn train_with(table: &RawTable, cfg: &TrainConfig, obs: &mut dyn TrainObserver) -> Result<TrainedModel> {
    cfg.validate()?;
    if table.len() < cfg.batch_size {
        return Err(Error::InvalidArgument(format!(
            "table has {} rows, fewer than the batch size {}",
            table.len(),
            cfg.batch_size
        )));
    }
    let schema = table.schema().clone();
    let layout = MatrixLayout::for_attributes(schema.len())?;
    let encoded = encode_table(table, &layout)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (generator, discriminator, classifier) = build_networks(&layout, &cfg.net, &mut rng)?;
    let adam = |size| Adam::new(size, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2);
    let mut session = Session {
        opt_g: adam(generator.network().param_count()),
        opt_d: adam(discriminator.network().param_count()),
        opt_c: adam(classifier.network().param_count()),
        ewma: EwmaState::zeros(discriminator.feature_dim()),
        label_offset: layout.offset_of_attribute(schema.label_index()),
        generator,
        discriminator,
        classifier,
        rng,
    };

    let side = layout.side();
    let cells = layout.cells();
    let batches = table.len() / cfg.batch_size;
    let mut order: Vec<usize> = (0..table.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut session.rng);
        let mut sums = [0.0; 7];
        for b in 0..batches {
            let idx = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let mut data = Vec::with_capacity(idx.len() * cells);
            for &i in idx {
                data.extend_from_slice(encoded.matrix(i));
            }
            let real = Tensor::from_vec(idx.len(), 1, side, side, data);
            let losses = session.step(&real, cfg, epoch, b + 1, obs)?;
            if let Some(name) = losses.non_finite() {
                return Err(Error::NonFiniteLoss {
                    loss: name,
                    epoch,
                    batch: b + 1,
                });
            }
            for (s, v) in sums.iter_mut().zip(losses.as_array()) {
                *s += v;
            }
        }
        let k = batches as f64;
        let mean = LossValues {
            d_orig: sums[0] / k,
            g_orig: sums[1] / k,
            l_mean: sums[2] / k,
            l_sd: sums[3] / k,
            g_info: sums[4] / k,
            c_class: sums[5] / k,
            g_class: sums[6] / k,
        };
        history.push(mean);
        if obs.wants_snapshots() {
            let snap = snapshot(&session, &schema, &layout, cfg, &history, table.len());
            obs.on_epoch_end(epoch, &mean, Some(&snap))?;
        } else {
            obs.on_epoch_end(epoch, &mean, None)?;
        }
    }

    Ok(snapshot(&session, &schema, &layout, cfg, &history, table.len()))
}

fn snapshot(
    s: &Session,
    schema: &TableSchema,
    layout: &MatrixLayout,
    cfg: &TrainConfig,
    history: &[LossValues],
    train_rows: usize,
) -> TrainedModel {
    TrainedModel {
        generator: s.generator.clone(),
        discriminator: s.discriminator.clone(),
        classifier: s.classifier.clone(),
        schema: schema.clone(),
        layout: layout.clone(),
        config: cfg.clone(),
        ewma: s.ewma.clone(),
        history: history.to_vec(),
        train_rows,
    }
}

const SYNTH_BATCH: usize = 1024;

/// Generates `n` synthetic matrices with the generator in inference mode.
pub fn generate_matrices(model: &TrainedModel, n: usize, seed: u64) -> Result<MatrixBatch> {
    let z = sample_latent(n, model.generator.latent_dim(), seed);
    let k = model.generator.latent_dim();
    let mut data = Vec::with_capacity(n * model.layout.cells());
    for chunk in z.data().chunks(SYNTH_BATCH * k) {
        let part = LatentBatch::new(k, chunk.to_vec())?;
        data.extend(model.generator.generate(&part, &model.layout)?.into_data());
    }
    MatrixBatch::new(model.layout.clone(), data)
}

/// Decodes `n` generated records into a table with the training schema.
pub fn synthesize(model: &TrainedModel, n: usize, seed: u64) -> Result<RawTable> {
    if n == 0 {
        return Ok(RawTable::empty(model.schema.clone()));
    }
    decode_batch(&generate_matrices(model, n, seed)?, &model.schema)
}

/// Row indices of each chunk: a seeded shuffle cut into near-equal parts.
pub fn chunk_partition(rows: usize, chunk_count: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..rows).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = rows / chunk_count;
    let extra = rows % chunk_count;
    let mut out = Vec::with_capacity(chunk_count);
    let mut start = 0;
    for c in 0..chunk_count {
        let len = base + usize::from(c < extra);
        let mut part = order[start..start + len].to_vec();
        part.sort_unstable();
        out.push(part);
        start += len;
    }
    out
}

/// Trains one independent model per chunk and merges their synthetic
/// tables, each sized like its chunk. A single chunk reduces to
/// train + synthesize with the configured seed.
pub fn train_chunked(table: &RawTable, cfg: &TrainConfig, chunk_count: usize) -> Result<RawTable> {
    if chunk_count == 0 {
        return Err(Error::InvalidArgument("chunk count must be at least 1".into()));
    }
    if chunk_count == 1 {
        let model = train(table, cfg)?;
        return synthesize(&model, table.len(), cfg.seed);
    }
    let parts = chunk_partition(table.len(), chunk_count, cfg.seed);
    if let Some(small) = parts.iter().find(|p| p.len() < cfg.batch_size) {
        return Err(Error::InvalidArgument(format!(
            "chunk of {} rows is smaller than the batch size {}",
            small.len(),
            cfg.batch_size
        )));
    }
    let synth = parts
        .par_iter()
        .enumerate()
        .map(|(i, rows)| {
            let chunk = table.select(rows);
            let chunk_cfg = TrainConfig {
                seed: cfg.seed.wrapping_add(i as u64),
                ..cfg.clone()
            };
            let model = train(&chunk, &chunk_cfg)?;
            synthesize(&model, chunk.len(), chunk_cfg.seed)
        })
        .collect::<Result<Vec<_>>>()?;
    RawTable::concat(table.schema().clone(), synth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{ColumnDecl, ColumnKind};
    use crate::table::Value;

    fn tiny_table(n: usize) -> RawTable {
        let h = ["a", "b", "c", "y"];
        let d = vec![
            ColumnDecl::new("a", ColumnKind::Continuous).range(0.0, 1.0),
            ColumnDecl::new("b", ColumnKind::Discrete).range(0.0, 5.0),
            ColumnDecl::new("c", ColumnKind::Categorical).categories(&["x", "y", "z"]),
            ColumnDecl::new("y", ColumnKind::Label),
        ];
        let schema = TableSchema::build(&h, &d, &[]).unwrap();
        let rows = (0..n)
            .map(|i| {
                let a = (i as f64 * 0.137) % 1.0;
                vec![
                    Value::Number(a),
                    Value::Number((i % 6) as f64),
                    Value::Category(["x", "y", "z"][i % 3].into()),
                    Value::Number(if a > 0.5 { 1.0 } else { 0.0 }),
                ]
            })
            .collect();
        RawTable::new(schema, rows).unwrap()
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 16,
            net: NetConfig {
                latent_dim: 8,
                base_filters: 4,
                leaky_slope: 0.2,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn ewma_examples() {
        assert!((ewma_update(&[0.0, 0.0], &[2.0, -1.0], 0.99).unwrap()[0] - 0.02).abs() < 1e-15);
        let s = [0.3, -4.0];
        for (a, b) in ewma_update(&s, &s, 0.99).unwrap().iter().zip(s) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(ewma_update(&[1.0, 1.0], &[0.0, 0.0], 0.5).unwrap(), vec![0.5, 0.5]);
        assert!(ewma_update(&[1.0], &[1.0, 2.0], 0.5).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { batch_size: 1, ..TrainConfig::default() },
            TrainConfig { ewma_weight: 1.0, ..TrainConfig::default() },
            TrainConfig { ewma_weight: 0.0, ..TrainConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[derive(Default)]
    struct Recorder(Vec<TrainEvent>, usize);

    impl TrainObserver for Recorder {
        fn on_event(&mut self, _: usize, _: usize, e: TrainEvent) {
            self.0.push(e);
        }
        fn on_epoch_end(&mut self, _: usize, _: &LossValues, _: Option<&TrainedModel>) -> Result<()> {
            self.1 += 1;
            Ok(())
        }
    }

    #[test]
    fn update_order_per_batch() {
        let table = tiny_table(50);
        let mut rec = Recorder::default();
        let model = train_with(&table, &quick_cfg(), &mut rec).unwrap();
        // 50 rows / 16 = 3 full batches, last partial batch dropped.
        assert_eq!(rec.0.len(), 2 * 3 * 4);
        for chunk in rec.0.chunks(4) {
            assert_eq!(
                chunk,
                [
                    TrainEvent::DiscriminatorStep,
                    TrainEvent::ClassifierStep,
                    TrainEvent::EwmaUpdate,
                    TrainEvent::GeneratorStep
                ]
            );
        }
        assert_eq!(rec.1, 2);
        assert_eq!(model.history.len(), 2);
    }

    #[test]
    fn rejects_small_tables() {
        let err = train(&tiny_table(10), &quick_cfg()).unwrap_err();
        assert!(err.to_string().contains("batch size"));
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let table = tiny_table(40);
        let a = train(&table, &quick_cfg()).unwrap();
        let b = train(&table, &quick_cfg()).unwrap();
        assert_eq!(a, b);
        let sa = synthesize(&a, 30, 4).unwrap();
        assert_eq!(sa, synthesize(&b, 30, 4).unwrap());
        assert_eq!(sa.len(), 30);
        assert_eq!(sa.schema(), table.schema());
        for row in sa.rows() {
            for (c, v) in sa.schema().columns().iter().zip(row) {
                crate::table::validate_value(c, v).unwrap();
            }
        }
        assert!(synthesize(&a, 0, 1).unwrap().is_empty());
        let other = TrainConfig { seed: 1, ..quick_cfg() };
        assert_ne!(train(&table, &other).unwrap(), a);
    }

    #[test]
    fn ewma_starts_at_zero_and_has_feature_dim() {
        let table = tiny_table(32);
        let cfg = TrainConfig { epochs: 1, ..quick_cfg() };
        let model = train(&table, &cfg).unwrap();
        let dim = model.discriminator.feature_dim();
        assert_eq!(model.ewma.mean_x.len(), dim);
        // Two updates from zero with w = 0.99 keep the state small.
        let bound = model.ewma.mean_x.iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(bound < 0.1, "{bound}");
    }

    #[test]
    fn chunk_partition_covers_rows() {
        let parts = chunk_partition(2001, 2, 9);
        assert_eq!(parts.iter().map(Vec::len).collect::<Vec<_>>(), vec![1001, 1000]);
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        assert_eq!(all, (0..2001).collect::<Vec<_>>());
    }

    #[test]
    fn chunked_training() {
        let table = tiny_table(70);
        let cfg = TrainConfig { epochs: 1, ..quick_cfg() };
        let out = train_chunked(&table, &cfg, 2).unwrap();
        assert_eq!(out.len(), 70);
        let single = train_chunked(&table, &cfg, 1).unwrap();
        let model = train(&table, &cfg).unwrap();
        assert_eq!(single, synthesize(&model, 70, cfg.seed).unwrap());
        assert!(train_chunked(&table, &cfg, 5).is_err());
        assert!(train_chunked(&table, &cfg, 0).is_err());
    }

    #[test]
    fn history_csv_has_one_row_per_epoch() {
        let model = train(&tiny_table(40), &quick_cfg()).unwrap();
        let mut buf = Vec::new();
        model.write_history_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,d_orig,g_orig,l_mean,l_sd,g_info,c_class,g_class");
        assert_eq!(lines.len(), 3);
    }

    fn central_difference_check(cfg: &TrainConfig, seed: u64) -> f64 {
        let layout = MatrixLayout::for_attributes(16).unwrap();
        let net = NetConfig {
            latent_dim: 6,
            base_filters: 2,
            leaky_slope: 0.2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (g, d, c) = build_networks(&layout, &net, &mut rng).unwrap();
        let z = sample_latent(2, 6, seed + 1);
        let real = Tensor::from_vec(2, 1, 4, 4, sample_latent(2, 16, seed + 2).data().to_vec());
        let real_stats = losses::feature_stats(&d.forward(&real, Mode::Train).unwrap().feature_vectors()).unwrap();
        let dim = d.feature_dim();
        let prev = EwmaState {
            mean_x: vec![0.05; dim],
            sd_x: vec![0.02; dim],
            mean_z: vec![-0.03; dim],
            sd_z: vec![0.01; dim],
        };
        let label_offset = 15;
        let eval = |g: &Generator| {
            generator_objective(g, &d, &c, &z, &real_stats, &prev, label_offset, cfg).unwrap()
        };
        let analytic = eval(&g).grad;
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        let mut pick = ChaCha8Rng::seed_from_u64(seed + 3);
        for _ in 0..20 {
            let i = rand::Rng::random_range(&mut pick, 0..analytic.len());
            let mut gp = g.clone();
            gp.network_mut().params_mut()[i] += h;
            let mut gm = g.clone();
            gm.network_mut().params_mut()[i] -= h;
            let numeric = (eval(&gp).total - eval(&gm).total) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic[i] - numeric).abs() / denom);
        }
        worst
    }

    #[test]
    fn generator_objective_gradient_matches_finite_differences() {
        let cfg = TrainConfig {
            class_loss: ClassLossKind::CrossEntropy,
            ..TrainConfig::default()
        };
        for seed in [1, 2] {
            let err = central_difference_check(&cfg, seed);
            assert!(err < 1e-3, "seed {seed}: relative error {err}");
        }
    }
}
