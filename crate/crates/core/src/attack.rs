//! Membership inference against a trained model through shadow models.
//!
//! The attacker queries only the target generator, trains shadow models on
//! the synthetic tables it returns, labels discriminator outputs of each
//! shadow's own training records as `in` and of unseen real records as
//! `out`, and fits one membership classifier per label class.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{decode_batch, encode_table, MatrixLayout};
use crate::error::{Error, Result};
use crate::evaluation::learners::DecisionTree;
use crate::losses::PrivacyConfig;
use crate::nets::{sample_latent, Generator, LatentBatch};
use crate::schema::TableSchema;
use crate::table::RawTable;
use crate::trainer::{train, TrainConfig, TrainedModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Membership {
    In,
    Out,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSample {
    pub class_value: u8,
    pub d_probability: f64,
    pub membership: Membership,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    /// The target's own discriminator; available to the evaluator only.
    TargetDiscriminator,
    /// Mean discriminator probability over the shadow models.
    ShadowEnsemble,
}

impl FeatureSource {
    pub fn id(self) -> &'static str {
        match self {
            FeatureSource::TargetDiscriminator => "target_discriminator",
            FeatureSource::ShadowEnsemble => "shadow_ensemble",
        }
    }
}

/// Black-box handle on a target model: sampling its generator is the only
/// operation offered.
pub struct GeneratorOracle<'a> {
    generator: &'a Generator,
    schema: &'a TableSchema,
    layout: &'a MatrixLayout,
}

impl<'a> GeneratorOracle<'a> {
    pub fn new(model: &'a TrainedModel) -> Self {
        Self {
            generator: &model.generator,
            schema: &model.schema,
            layout: &model.layout,
        }
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<RawTable> {
        if n == 0 {
            return Ok(RawTable::empty(self.schema.clone()));
        }
        let k = self.generator.latent_dim();
        let z = sample_latent(n, k, seed);
        let mut data = Vec::with_capacity(n * self.layout.cells());
        for chunk in z.data().chunks(1024 * k) {
            data.extend(self.generator.generate(&LatentBatch::new(k, chunk.to_vec())?, self.layout)?.into_data());
        }
        decode_batch(&crate::codec::MatrixBatch::new(self.layout.clone(), data)?, self.schema)
    }
}

fn derived_seed(seed: u64, stream: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(i as u64)
}

/// `shadow_count` synthetic tables drawn from the target generator.
pub fn build_shadow_corpora(target: &GeneratorOracle<'_>, shadow_count: usize, rows_per_shadow: usize, seed: u64) -> Result<Vec<RawTable>> {
    if shadow_count == 0 {
        return Err(Error::InvalidArgument("shadow count must be at least 1".into()));
    }
    (0..shadow_count)
        .map(|i| target.sample(rows_per_shadow, derived_seed(seed, 1, i)))
        .collect()
}

/// One shadow per corpus, trained with `cfg` and a per-shadow seed.
pub fn train_shadows(corpora: &[RawTable], cfg: &TrainConfig) -> Result<Vec<TrainedModel>> {
    corpora
        .par_iter()
        .enumerate()
        .map(|(i, corpus)| {
            let shadow_cfg = TrainConfig {
                seed: derived_seed(cfg.seed, 2, i),
                ..cfg.clone()
            };
            train(corpus, &shadow_cfg)
        })
        .collect()
}

fn class_values(table: &RawTable) -> Vec<u8> {
    table.label_values().iter().map(|v| u8::from(*v > 0.5)).collect()
}

fn discriminator_probs(model: &TrainedModel, records: &RawTable) -> Result<Vec<f64>> {
    if records.schema() != &model.schema {
        return Err(Error::Schema("records do not match the model schema".into()));
    }
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let batch = encode_table(records, &model.layout)?;
    Ok(model.discriminator.discriminate(&batch)?.0)
}

/// Attack training samples from one shadow: its own training records are
/// `in`, the unseen real records are `out`.
pub fn make_attack_samples(shadow: &TrainedModel, in_records: &RawTable, out_records: &RawTable) -> Result<Vec<AttackSample>> {
    let mut out = Vec::with_capacity(in_records.len() + out_records.len());
    for (records, membership) in [(in_records, Membership::In), (out_records, Membership::Out)] {
        let probs = discriminator_probs(shadow, records)?;
        out.extend(class_values(records).into_iter().zip(probs).map(|(class_value, d_probability)| AttackSample {
            class_value,
            d_probability,
            membership,
        }));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub enum MembershipLearner {
    /// Predicts `in` when the probability is on the `in_above` side of the threshold.
    Threshold { threshold: f64, in_above: bool },
    Tree(DecisionTree),
    /// Only one membership value was seen for this class.
    Constant(f64),
}

pub const ATTACK_TREE_DEPTH: usize = 3;
const CV_FOLDS: usize = 5;

impl MembershipLearner {
    /// Score of being `in`; at least 0.5 predicts `in`.
    pub fn score(&self, p: f64) -> f64 {
        match self {
            MembershipLearner::Threshold { threshold, in_above } => {
                let s = if *in_above { p - threshold } else { threshold - p };
                (0.5 + 0.5 * s).clamp(0.0, 1.0)
            }
            MembershipLearner::Tree(t) => t.predict(&[vec![p]])[0],
            MembershipLearner::Constant(v) => *v,
        }
    }

    /// Best macro-F-1 cut by one sweep over the sorted probabilities.
    fn fit_threshold(p: &[f64], y: &[f64]) -> Self {
        let mut pairs: Vec<(f64, bool)> = p.iter().zip(y).map(|(&v, &t)| (v, t > 0.5)).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = pairs.len();
        let total_in = pairs.iter().filter(|e| e.1).count() as f64;
        let total_out = n as f64 - total_in;
        let (mut below_in, mut below_out) = (0.0, 0.0);
        let mut best = (f64::NEG_INFINITY, MembershipLearner::Constant(1.0));
        for k in 0..=n {
            if k > 0 {
                if pairs[k - 1].1 {
                    below_in += 1.0;
                } else {
                    below_out += 1.0;
                }
            }
            if k > 0 && k < n && pairs[k - 1].0 == pairs[k].0 {
                continue;
            }
            let threshold = match k {
                0 => f64::NEG_INFINITY,
                k if k == n => f64::INFINITY,
                k => 0.5 * (pairs[k - 1].0 + pairs[k].0),
            };
            let (above_in, above_out) = (total_in - below_in, total_out - below_out);
            for in_above in [true, false] {
                let f1 = if in_above {
                    macro_f1_counts(above_in, above_out, below_in, below_out, below_in, above_out)
                } else {
                    macro_f1_counts(below_in, below_out, above_in, above_out, above_in, below_out)
                };
                if f1 > best.0 {
                    best = (f1, MembershipLearner::Threshold { threshold, in_above });
                }
            }
        }
        best.1
    }

    fn fit_tree(p: &[f64], y: &[f64]) -> Result<Self> {
        let x: Vec<Vec<f64>> = p.iter().map(|&v| vec![v]).collect();
        Ok(MembershipLearner::Tree(DecisionTree::fit(&x, y, ATTACK_TREE_DEPTH, true)?))
    }
}

/// Macro F-1 over membership classes of 0/1 targets and `in` scores.
fn membership_f1(y: &[f64], scores: &[f64]) -> f64 {
    let truth: Vec<bool> = y.iter().map(|v| *v > 0.5).collect();
    let pred: Vec<bool> = scores.iter().map(|s| *s >= 0.5).collect();
    macro_f1(&truth, &pred)
}

/// Per-class membership classifiers.
#[derive(Debug, Clone)]
pub struct AttackModel {
    pub per_class: Vec<(u8, MembershipLearner)>,
}

impl AttackModel {
    pub fn learner(&self, class_value: u8) -> Option<&MembershipLearner> {
        self.per_class.iter().find(|(c, _)| *c == class_value).map(|(_, m)| m)
    }
}

/// Picks, per class, the learner with the best cross-validated macro F-1
/// and refits it on all samples of that class.
pub fn train_attack_models(samples: &[AttackSample], seed: u64) -> Result<AttackModel> {
    let has = |m: Membership| samples.iter().any(|s| s.membership == m);
    if !has(Membership::In) || !has(Membership::Out) {
        return Err(Error::InvalidArgument("attack samples need both `in` and `out` records".into()));
    }
    let mut classes: Vec<u8> = samples.iter().map(|s| s.class_value).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut per_class = Vec::new();
    for c in classes {
        let (p, y): (Vec<f64>, Vec<f64>) = samples
            .iter()
            .filter(|s| s.class_value == c)
            .map(|s| (s.d_probability, if s.membership == Membership::In { 1.0 } else { 0.0 }))
            .unzip();
        let pos = y.iter().filter(|v| **v > 0.5).count();
        if pos == 0 || pos == y.len() {
            per_class.push((c, MembershipLearner::Constant(if pos == 0 { 0.0 } else { 1.0 })));
            continue;
        }
        let mut order: Vec<usize> = (0..p.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derived_seed(seed, 3, c as usize)));
        let folds = CV_FOLDS.min(p.len());
        let mut cv = [0.0f64; 2];
        for f in 0..folds {
            let (test, fit): (Vec<usize>, Vec<usize>) = (0..order.len()).partition(|k| k % folds == f);
            let pick = |idx: &[usize], v: &[f64]| idx.iter().map(|&k| v[order[k]]).collect::<Vec<f64>>();
            let (pf, yf, pt, yt) = (pick(&fit, &p), pick(&fit, &y), pick(&test, &p), pick(&test, &y));
            let cands = [MembershipLearner::fit_threshold(&pf, &yf), MembershipLearner::fit_tree(&pf, &yf)?];
            for (slot, m) in cv.iter_mut().zip(&cands) {
                *slot += membership_f1(&yt, &pt.iter().map(|&v| m.score(v)).collect::<Vec<_>>());
            }
        }
        let learner = if cv[1] > cv[0] {
            MembershipLearner::fit_tree(&p, &y)?
        } else {
            MembershipLearner::fit_threshold(&p, &y)
        };
        per_class.push((c, learner));
    }
    Ok(AttackModel { per_class })
}

/// Area under the ROC curve by the Mann-Whitney statistic; ties count half.
/// `None` when either group is empty.
pub fn auc_roc(positive: &[f64], negative: &[f64]) -> Option<f64> {
    if positive.is_empty() || negative.is_empty() {
        return None;
    }
    let mut all: Vec<(f64, bool)> = positive
        .iter()
        .map(|&s| (s, true))
        .chain(negative.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + j + 1) as f64 / 2.0;
        rank_sum += avg_rank * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let (np, nn) = (positive.len() as f64, negative.len() as f64);
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Mean of the F-1 scores of the `in` and `out` classes.
pub fn macro_f1(truth_in: &[bool], predicted_in: &[bool]) -> f64 {
    let mut c = [0.0f64; 4];
    for (&t, &p) in truth_in.iter().zip(predicted_in) {
        c[(t as usize) * 2 + p as usize] += 1.0;
    }
    let [out_out, out_in, in_out, in_in] = c;
    macro_f1_counts(in_in, out_in, in_out, out_out, in_out, out_in)
}

fn f1_counts(tp: f64, fp: f64, fneg: f64) -> f64 {
    if tp == 0.0 {
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fneg)
    }
}

/// Macro F-1 from `tp`, `fp`, `fn` of the `in` class, then of the `out` class.
fn macro_f1_counts(tp_in: f64, fp_in: f64, fn_in: f64, tp_out: f64, fp_out: f64, fn_out: f64) -> f64 {
    0.5 * (f1_counts(tp_in, fp_in, fn_in) + f1_counts(tp_out, fp_out, fn_out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class_value: u8,
    pub records: usize,
    pub f1: f64,
    pub aucroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    /// Macro F-1 over membership classes, averaged over label classes.
    pub f1: f64,
    /// AUCROC averaged over label classes.
    pub aucroc: f64,
    pub per_class: Vec<ClassScore>,
    pub privacy: PrivacyConfig,
    pub feature_source: FeatureSource,
    pub in_records: usize,
    pub out_records: usize,
}

/// Scores the attack on a balanced set of target training records (`in`)
/// and unseen records (`out`).
pub fn attack_eval(
    attack: &AttackModel,
    target: &TrainedModel,
    shadows: &[TrainedModel],
    in_test: &RawTable,
    out_test: &RawTable,
    source: FeatureSource,
) -> Result<AttackReport> {
    if in_test.len() != out_test.len() {
        return Err(Error::InvalidArgument(format!(
            "attack evaluation needs balanced sets, got {} in and {} out",
            in_test.len(),
            out_test.len()
        )));
    }
    if in_test.is_empty() {
        return Err(Error::InvalidArgument("attack evaluation set is empty".into()));
    }
    let probs = |records: &RawTable| -> Result<Vec<f64>> {
        match source {
            FeatureSource::TargetDiscriminator => discriminator_probs(target, records),
            FeatureSource::ShadowEnsemble => {
                if shadows.is_empty() {
                    return Err(Error::InvalidArgument("shadow ensemble needs at least one shadow".into()));
                }
                let mut acc = vec![0.0; records.len()];
                for s in shadows {
                    for (a, p) in acc.iter_mut().zip(discriminator_probs(s, records)?) {
                        *a += p;
                    }
                }
                Ok(acc.into_iter().map(|a| a / shadows.len() as f64).collect())
            }
        }
    };
    let mut rows: Vec<(u8, f64, bool)> = Vec::new();
    for (records, is_in) in [(in_test, true), (out_test, false)] {
        for (c, p) in class_values(records).into_iter().zip(probs(records)?) {
            rows.push((c, p, is_in));
        }
    }
    let mut classes: Vec<u8> = rows.iter().map(|r| r.0).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut per_class = Vec::new();
    for c in classes {
        let learner = attack
            .learner(c)
            .ok_or_else(|| Error::Evaluation(format!("no attack model for class {c}")))?;
        let subset: Vec<&(u8, f64, bool)> = rows.iter().filter(|r| r.0 == c).collect();
        let scores: Vec<f64> = subset.iter().map(|r| learner.score(r.1)).collect();
        let truth: Vec<bool> = subset.iter().map(|r| r.2).collect();
        let (pos, neg): (Vec<f64>, Vec<f64>) = {
            let pos = scores.iter().zip(&truth).filter(|(_, t)| **t).map(|(s, _)| *s).collect();
            let neg = scores.iter().zip(&truth).filter(|(_, t)| !**t).map(|(s, _)| *s).collect();
            (pos, neg)
        };
        let Some(aucroc) = auc_roc(&pos, &neg) else {
            continue;
        };
        let predicted: Vec<bool> = scores.iter().map(|s| *s >= 0.5).collect();
        per_class.push(ClassScore {
            class_value: c,
            records: subset.len(),
            f1: macro_f1(&truth, &predicted),
            aucroc,
        });
    }
    if per_class.is_empty() {
        return Err(Error::Evaluation("no label class holds both `in` and `out` records".into()));
    }
    let k = per_class.len() as f64;
    Ok(AttackReport {
        f1: per_class.iter().map(|c| c.f1).sum::<f64>() / k,
        aucroc: per_class.iter().map(|c| c.aucroc).sum::<f64>() / k,
        per_class,
        privacy: target.config.privacy,
        feature_source: source,
        in_records: in_test.len(),
        out_records: out_test.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub shadow_count: usize,
    /// Rows per shadow corpus; defaults to the target's training size.
    pub rows_per_shadow: Option<usize>,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            shadow_count: 5,
            rows_per_shadow: None,
            seed: 0,
        }
    }
}

pub struct AttackOutcome {
    /// One report per feature source.
    pub reports: Vec<AttackReport>,
    pub samples: Vec<AttackSample>,
    pub shadows: Vec<TrainedModel>,
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Full pipeline. The holdout is split in half: one half serves as the
/// shadows' `out` records, the other as the evaluation `out` set, matched
/// by an equal-sized sample of the target's training records.
///
/// Shadow attack samples are balanced by subsampling each shadow's `in`
/// records to the number of `out` records.
pub fn run_attack(target: &TrainedModel, train_records: &RawTable, holdout: &RawTable, cfg: &AttackConfig) -> Result<AttackOutcome> {
    if holdout.len() < 2 {
        return Err(Error::InvalidArgument("holdout needs at least two records".into()));
    }
    let order = shuffled(holdout.len(), derived_seed(cfg.seed, 4, 0));
    let half = holdout.len() / 2;
    let shadow_out = holdout.select(&order[..half]);
    let eval_out_all = holdout.select(&order[half..]);

    let oracle = GeneratorOracle::new(target);
    let rows = cfg.rows_per_shadow.unwrap_or(target.train_rows);
    let corpora = build_shadow_corpora(&oracle, cfg.shadow_count, rows, cfg.seed)?;
    let shadow_cfg = TrainConfig {
        seed: derived_seed(cfg.seed, 5, 0),
        ..target.config.clone()
    };
    let shadows = train_shadows(&corpora, &shadow_cfg)?;

    let mut samples = Vec::new();
    for (i, (shadow, corpus)) in shadows.iter().zip(&corpora).enumerate() {
        let take = shadow_out.len().min(corpus.len());
        let pick = shuffled(corpus.len(), derived_seed(cfg.seed, 6, i));
        let mut pick = pick[..take].to_vec();
        pick.sort_unstable();
        samples.extend(make_attack_samples(shadow, &corpus.select(&pick), &shadow_out)?);
    }
    let attack = train_attack_models(&samples, cfg.seed)?;

    let n_eval = eval_out_all.len().min(train_records.len());
    let in_pick = shuffled(train_records.len(), derived_seed(cfg.seed, 7, 0));
    let mut in_pick = in_pick[..n_eval].to_vec();
    in_pick.sort_unstable();
    let in_test = train_records.select(&in_pick);
    let out_test = eval_out_all.select(&(0..n_eval).collect::<Vec<_>>());

    let reports = [FeatureSource::ShadowEnsemble, FeatureSource::TargetDiscriminator]
        .into_iter()
        .map(|src| attack_eval(&attack, target, &shadows, &in_test, &out_test, src))
        .collect::<Result<Vec<_>>>()?;
    Ok(AttackOutcome { reports, samples, shadows })
}

pub fn write_reports_csv<W: Write>(dataset: &str, reports: &[AttackReport], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(["dataset", "privacy", "feature_source", "class", "records", "f1", "aucroc"])?;
    for r in reports {
        let privacy = r.privacy.describe();
        let total = r.in_records + r.out_records;
        let mut rec = |class: String, n: usize, f1: f64, auc: f64| {
            w.write_record([
                dataset.to_string(),
                privacy.clone(),
                r.feature_source.id().to_string(),
                class,
                n.to_string(),
                f1.to_string(),
                auc.to_string(),
            ])
        };
        rec("all".into(), total, r.f1, r.aucroc)?;
        for c in &r.per_class {
            rec(c.class_value.to_string(), c.records, c.f1, c.aucroc)?;
        }
    }
    w.flush().map_err(|e| Error::io("<attack report>", e))
}

pub fn write_samples_csv<W: Write>(samples: &[AttackSample], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(["class", "d_probability", "membership"])?;
    for s in samples {
        let m = match s.membership {
            Membership::In => "in",
            Membership::Out => "out",
        };
        w.write_record([s.class_value.to_string(), s.d_probability.to_string(), m.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<attack samples>", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::NetConfig;
    use crate::toy;
    use rand::Rng;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 16,
            net: NetConfig {
                latent_dim: 4,
                base_filters: 2,
                leaky_slope: 0.2,
            },
            ..TrainConfig::default()
        }
    }

    fn tiny_target() -> (TrainedModel, RawTable, RawTable) {
        let t = toy::toy_table(120, 2);
        let train_part = t.select(&(0..80).collect::<Vec<_>>());
        let holdout = t.select(&(80..120).collect::<Vec<_>>());
        (train(&train_part, &tiny_cfg()).unwrap(), train_part, holdout)
    }

    fn sample(c: u8, p: f64, m: Membership) -> AttackSample {
        AttackSample {
            class_value: c,
            d_probability: p,
            membership: m,
        }
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_roc(&[0.9, 0.8], &[0.1, 0.2]), Some(1.0));
        assert_eq!(auc_roc(&[0.1], &[0.9]), Some(0.0));
        assert_eq!(auc_roc(&[0.5, 0.5], &[0.5, 0.5]), Some(0.5));
        assert_eq!(auc_roc(&[0.6, 0.4], &[0.5]), Some(0.5));
        assert_eq!(auc_roc(&[], &[0.5]), None);
    }

    #[test]
    fn macro_f1_examples() {
        assert_eq!(macro_f1(&[true, false], &[true, false]), 1.0);
        assert_eq!(macro_f1(&[true, false], &[false, true]), 0.0);
        // All predicted in on a balanced set: F-1(in) = 2/3, F-1(out) = 0.
        assert!((macro_f1(&[true, true, false, false], &[true; 4]) - 1.0 / 3.0).abs() < 1e-12);
    }

    fn brute_force_threshold_f1(p: &[f64], y: &[f64]) -> f64 {
        let mut cuts = p.to_vec();
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let mut cands = vec![f64::NEG_INFINITY, f64::INFINITY];
        cands.extend(cuts.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        let truth: Vec<bool> = y.iter().map(|v| *v > 0.5).collect();
        let mut best: f64 = 0.0;
        for t in cands {
            for above in [true, false] {
                let pred: Vec<bool> = p.iter().map(|&v| if above { v > t } else { v < t }).collect();
                best = best.max(macro_f1(&truth, &pred));
            }
        }
        best
    }

    proptest::proptest! {
        #[test]
        fn threshold_sweep_matches_exhaustive_search(
            data in proptest::collection::vec((0u8..20, proptest::bool::ANY), 2..60)
        ) {
            let p: Vec<f64> = data.iter().map(|d| d.0 as f64 / 20.0).collect();
            let y: Vec<f64> = data.iter().map(|d| if d.1 { 1.0 } else { 0.0 }).collect();
            let m = MembershipLearner::fit_threshold(&p, &y);
            let got = membership_f1(&y, &p.iter().map(|&v| m.score(v)).collect::<Vec<_>>());
            proptest::prop_assert!((got - brute_force_threshold_f1(&p, &y)).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_mapping() {
        let (model, train_part, holdout) = tiny_target();
        let s = make_attack_samples(&model, &train_part, &holdout).unwrap();
        assert_eq!(s.len(), train_part.len() + holdout.len());
        assert!(s[..80].iter().all(|x| x.membership == Membership::In));
        assert!(s.iter().all(|x| (0.0..=1.0).contains(&x.d_probability)));
        let labels = class_values(&train_part);
        assert!(s[..80].iter().zip(labels).all(|(x, c)| x.class_value == c));
        let schema = TableSchema::build(
            &["a", "y"],
            &[
                crate::schema::ColumnDecl::new("a", crate::schema::ColumnKind::Continuous).range(0.0, 1.0),
                crate::schema::ColumnDecl::new("y", crate::schema::ColumnKind::Label),
            ],
            &[],
        )
        .unwrap();
        let other = RawTable::empty(schema);
        assert!(make_attack_samples(&model, &other, &other).is_err());
    }

    #[test]
    fn separable_samples_give_perfect_training_f1() {
        let mut samples = Vec::new();
        for c in 0..2u8 {
            for i in 0..20 {
                samples.push(sample(c, 0.9 + 0.005 * i as f64, Membership::In));
                samples.push(sample(c, 0.1 - 0.005 * i as f64, Membership::Out));
            }
        }
        let model = train_attack_models(&samples, 0).unwrap();
        assert_eq!(model.per_class.len(), 2);
        for c in 0..2u8 {
            let l = model.learner(c).unwrap();
            let truth: Vec<bool> = samples.iter().filter(|s| s.class_value == c).map(|s| s.membership == Membership::In).collect();
            let pred: Vec<bool> = samples.iter().filter(|s| s.class_value == c).map(|s| l.score(s.d_probability) >= 0.5).collect();
            assert_eq!(macro_f1(&truth, &pred), 1.0);
        }
    }

    #[test]
    fn shuffled_membership_is_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut aucs = Vec::new();
        for rep in 0..5 {
            let samples: Vec<AttackSample> = (0..400)
                .map(|i| {
                    let m = if rng.random_bool(0.5) { Membership::In } else { Membership::Out };
                    sample((i % 2) as u8, rng.random(), m)
                })
                .collect();
            let (fit, held) = samples.split_at(300);
            let model = train_attack_models(fit, rep).unwrap();
            let l = model.learner(0).unwrap();
            let pos: Vec<f64> = held.iter().filter(|s| s.class_value == 0 && s.membership == Membership::In).map(|s| l.score(s.d_probability)).collect();
            let neg: Vec<f64> = held.iter().filter(|s| s.class_value == 0 && s.membership == Membership::Out).map(|s| l.score(s.d_probability)).collect();
            aucs.push(auc_roc(&pos, &neg).unwrap());
        }
        let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
        assert!((mean - 0.5).abs() <= 0.1, "{aucs:?}");
    }

    #[test]
    fn degenerate_membership_rejected() {
        let s = vec![sample(0, 0.3, Membership::In), sample(1, 0.4, Membership::In)];
        assert!(train_attack_models(&s, 0).is_err());
    }

    #[test]
    fn corpora_are_seeded_and_black_box() {
        let (model, _, _) = tiny_target();
        model.discriminator.reset_access_count();
        model.classifier.reset_access_count();
        let oracle = GeneratorOracle::new(&model);
        let a = build_shadow_corpora(&oracle, 3, 25, 5).unwrap();
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|t| t.len() == 25 && t.schema() == &model.schema));
        assert_eq!(a, build_shadow_corpora(&oracle, 3, 25, 5).unwrap());
        assert_ne!(a[0], a[1]);
        assert_eq!(model.discriminator.access_count(), 0);
        assert_eq!(model.classifier.access_count(), 0);
        assert!(build_shadow_corpora(&oracle, 0, 25, 5).is_err());
    }

    #[test]
    fn shadows_mirror_target_architecture() {
        let (model, _, _) = tiny_target();
        let corpora = build_shadow_corpora(&GeneratorOracle::new(&model), 2, 32, 1).unwrap();
        let shadows = train_shadows(&corpora, &model.config).unwrap();
        assert_eq!(shadows.len(), 2);
        for s in &shadows {
            assert_eq!(s.discriminator.signature(), model.discriminator.signature());
            assert_eq!(s.generator.network().signature(), model.generator.network().signature());
        }
        // Per-shadow seeds depend on the position only, so shadow 0 matches
        // whether trained alone or alongside others.
        assert_eq!(train_shadows(&corpora[..1], &model.config).unwrap()[0], shadows[0]);
    }

    #[test]
    fn eval_requires_balance_and_reports_bounds() {
        let (model, train_part, holdout) = tiny_target();
        let samples = make_attack_samples(&model, &train_part, &holdout).unwrap();
        let attack = train_attack_models(&samples, 0).unwrap();
        let in_test = train_part.select(&(0..20).collect::<Vec<_>>());
        let out_test = holdout.select(&(0..20).collect::<Vec<_>>());
        let r = attack_eval(&attack, &model, &[], &in_test, &out_test, FeatureSource::TargetDiscriminator).unwrap();
        assert!((0.0..=1.0).contains(&r.f1) && (0.0..=1.0).contains(&r.aucroc));
        assert_eq!((r.in_records, r.out_records), (20, 20));
        let short = holdout.select(&(0..19).collect::<Vec<_>>());
        assert!(attack_eval(&attack, &model, &[], &in_test, &short, FeatureSource::TargetDiscriminator).is_err());
        assert!(attack_eval(&attack, &model, &[], &in_test, &out_test, FeatureSource::ShadowEnsemble).is_err());
    }

    #[test]
    fn constant_attack_has_chance_auc() {
        let (model, train_part, holdout) = tiny_target();
        let attack = AttackModel {
            per_class: vec![(0, MembershipLearner::Constant(1.0)), (1, MembershipLearner::Constant(1.0))],
        };
        let in_test = train_part.select(&(0..20).collect::<Vec<_>>());
        let out_test = holdout.select(&(0..20).collect::<Vec<_>>());
        let r = attack_eval(&attack, &model, &[], &in_test, &out_test, FeatureSource::TargetDiscriminator).unwrap();
        assert_eq!(r.aucroc, 0.5);
    }

    #[test]
    fn pipeline_with_shadow_features_never_touches_target_critics() {
        let (model, train_part, holdout) = tiny_target();
        model.discriminator.reset_access_count();
        model.classifier.reset_access_count();
        let cfg = AttackConfig {
            shadow_count: 2,
            rows_per_shadow: Some(40),
            seed: 3,
        };
        let out = run_attack(&model, &train_part, &holdout, &cfg).unwrap();
        // The shadow-ensemble report is computed first.
        assert_eq!(out.reports[0].feature_source, FeatureSource::ShadowEnsemble);
        assert_eq!(model.classifier.access_count(), 0);
        // Only the evaluator-owned report queries the target: once for the
        // `in` set, once for the `out` set.
        assert_eq!(model.discriminator.access_count(), 2);
        for r in &out.reports {
            assert_eq!(r.in_records, r.out_records);
        }
        let mut buf = Vec::new();
        write_reports_csv("toy", &out.reports, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("dataset,privacy,feature_source,class,records,f1,aucroc\n"));
        assert!(text.contains("shadow_ensemble") && text.contains("target_discriminator"));
    }
}
