//! Adversarial, information and classification losses.
//!
//! Every loss is a quantity to minimize. Gradients are given w.r.t. the
//! inputs of each loss so the trainer can chain them into the networks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Added inside logarithms.
pub const LOG_EPS: f64 = 1e-8;

/// Hinge thresholds on the feature-statistic discrepancies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyConfig {
    pub delta_mean: f64,
    pub delta_sd: f64,
}

impl PrivacyConfig {
    pub fn new(delta_mean: f64, delta_sd: f64) -> Result<Self> {
        if !(delta_mean >= 0.0 && delta_sd >= 0.0 && delta_mean.is_finite() && delta_sd.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "privacy thresholds must be finite and non-negative, got ({delta_mean}, {delta_sd})"
            )));
        }
        Ok(Self {
            delta_mean,
            delta_sd,
        })
    }

    pub fn preset(p: PrivacyPreset) -> Self {
        let d = match p {
            PrivacyPreset::Low => 0.0,
            PrivacyPreset::Mid => 0.1,
            PrivacyPreset::High => 0.2,
        };
        Self {
            delta_mean: d,
            delta_sd: d,
        }
    }

    /// Preset name if these thresholds match one, else `custom(..)`.
    pub fn describe(&self) -> String {
        for p in [PrivacyPreset::Low, PrivacyPreset::Mid, PrivacyPreset::High] {
            if *self == Self::preset(p) {
                return p.to_string();
            }
        }
        format!("custom({},{})", self.delta_mean, self.delta_sd)
    }
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self::preset(PrivacyPreset::Low)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrivacyPreset {
    Low,
    Mid,
    High,
}

impl fmt::Display for PrivacyPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrivacyPreset::Low => "low",
            PrivacyPreset::Mid => "mid",
            PrivacyPreset::High => "high",
        })
    }
}

impl FromStr for PrivacyPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(PrivacyPreset::Low),
            "mid" => Ok(PrivacyPreset::Mid),
            "high" => Ok(PrivacyPreset::High),
            other => Err(Error::InvalidArgument(format!(
                "unknown privacy preset `{other}` (expected low, mid or high)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorLossMode {
    /// Minimize `mean ln(1 - D(G(z)))` as written in the minimax game.
    Literal,
    /// Minimize `-mean ln D(G(z))`; same optimum, stronger early gradients.
    #[default]
    Nonsaturating,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassLossKind {
    /// Mean absolute difference between label and prediction.
    #[default]
    AbsoluteDifference,
    /// Binary cross-entropy of the prediction against the label.
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchFeatureStats {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

/// All per-step loss values, as logged by the trainer.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossValues {
    pub d_orig: f64,
    pub g_orig: f64,
    pub l_mean: f64,
    pub l_sd: f64,
    pub g_info: f64,
    pub c_class: f64,
    pub g_class: f64,
}

impl LossValues {
    pub const NAMES: [&'static str; 7] = ["d_orig", "g_orig", "l_mean", "l_sd", "g_info", "c_class", "g_class"];

    pub fn as_array(&self) -> [f64; 7] {
        [
            self.d_orig,
            self.g_orig,
            self.l_mean,
            self.l_sd,
            self.g_info,
            self.c_class,
            self.g_class,
        ]
    }

    /// First non-finite entry, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        Self::NAMES
            .iter()
            .zip(self.as_array())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
    }
}

fn non_empty(xs: &[f64], what: &str) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::InvalidArgument(format!("{what}: empty batch")));
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Negated discriminator objective.
pub fn orig_loss_d(p_real: &[f64], p_fake: &[f64]) -> Result<f64> {
    non_empty(p_real, "discriminator loss (real)")?;
    non_empty(p_fake, "discriminator loss (fake)")?;
    let real: Vec<f64> = p_real.iter().map(|p| (p + LOG_EPS).ln()).collect();
    let fake: Vec<f64> = p_fake.iter().map(|p| (1.0 - p + LOG_EPS).ln()).collect();
    Ok(-(mean(&real) + mean(&fake)))
}

/// Gradients of [`orig_loss_d`] w.r.t. each real and fake probability.
pub fn orig_loss_d_grad(p_real: &[f64], p_fake: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let nr = p_real.len() as f64;
    let nf = p_fake.len() as f64;
    (
        p_real.iter().map(|p| -1.0 / (nr * (p + LOG_EPS))).collect(),
        p_fake.iter().map(|p| 1.0 / (nf * (1.0 - p + LOG_EPS))).collect(),
    )
}

pub fn orig_loss_g(p_fake: &[f64], mode: GeneratorLossMode) -> Result<f64> {
    non_empty(p_fake, "generator loss")?;
    Ok(match mode {
        GeneratorLossMode::Literal => mean(&p_fake.iter().map(|p| (1.0 - p + LOG_EPS).ln()).collect::<Vec<_>>()),
        GeneratorLossMode::Nonsaturating => -mean(&p_fake.iter().map(|p| (p + LOG_EPS).ln()).collect::<Vec<_>>()),
    })
}

pub fn orig_loss_g_grad(p_fake: &[f64], mode: GeneratorLossMode) -> Vec<f64> {
    let n = p_fake.len() as f64;
    p_fake
        .iter()
        .map(|p| match mode {
            GeneratorLossMode::Literal => -1.0 / (n * (1.0 - p + LOG_EPS)),
            GeneratorLossMode::Nonsaturating => -1.0 / (n * (p + LOG_EPS)),
        })
        .collect()
}

/// Component-wise mean and population standard deviation.
pub fn feature_stats(features: &[Vec<f64>]) -> Result<BatchFeatureStats> {
    let first = features
        .first()
        .ok_or_else(|| Error::InvalidArgument("feature statistics: empty batch".into()))?;
    let dim = first.len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Shape("feature vectors differ in dimension".into()));
    }
    let n = features.len() as f64;
    let mut mean = vec![0.0; dim];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for f in features {
        for j in 0..dim {
            let d = f[j] - mean[j];
            var[j] += d * d;
        }
    }
    let sd = var.into_iter().map(|v| (v / n).sqrt()).collect();
    Ok(BatchFeatureStats { mean, sd })
}

/// Gradient of a scalar w.r.t. the batch features given its gradients
/// w.r.t. the batch mean and standard deviation.
pub fn feature_stats_backward(
    features: &[Vec<f64>],
    stats: &BatchFeatureStats,
    d_mean: &[f64],
    d_sd: &[f64],
) -> Vec<Vec<f64>> {
    let n = features.len() as f64;
    features
        .iter()
        .map(|f| {
            f.iter()
                .enumerate()
                .map(|(j, &v)| {
                    let via_sd = if stats.sd[j] > 0.0 {
                        d_sd[j] * (v - stats.mean[j]) / (n * stats.sd[j])
                    } else {
                        0.0
                    };
                    d_mean[j] / n + via_sd
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfoLoss {
    pub l_mean: f64,
    pub l_sd: f64,
    pub g_info: f64,
}

fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Hinge information loss between real and synthetic feature statistics.
pub fn info_loss(real: &BatchFeatureStats, fake: &BatchFeatureStats, cfg: &PrivacyConfig) -> Result<InfoLoss> {
    let dim = real.mean.len();
    if real.sd.len() != dim || fake.mean.len() != dim || fake.sd.len() != dim {
        return Err(Error::Shape(format!(
            "feature statistics dimensions differ: real {}/{}, fake {}/{}",
            real.mean.len(),
            real.sd.len(),
            fake.mean.len(),
            fake.sd.len()
        )));
    }
    let l_mean = l2_distance(&real.mean, &fake.mean);
    let l_sd = l2_distance(&real.sd, &fake.sd);
    let g_info = (l_mean - cfg.delta_mean).max(0.0) + (l_sd - cfg.delta_sd).max(0.0);
    Ok(InfoLoss { l_mean, l_sd, g_info })
}

/// Gradient of `g_info` w.r.t. the fake mean and fake sd vectors.
pub fn info_loss_grad(
    real: &BatchFeatureStats,
    fake: &BatchFeatureStats,
    loss: &InfoLoss,
    cfg: &PrivacyConfig,
) -> (Vec<f64>, Vec<f64>) {
    let part = |r: &[f64], f: &[f64], dist: f64, delta: f64| -> Vec<f64> {
        if dist > delta && dist > 0.0 {
            r.iter().zip(f).map(|(a, b)| (b - a) / dist).collect()
        } else {
            vec![0.0; r.len()]
        }
    };
    (
        part(&real.mean, &fake.mean, loss.l_mean, cfg.delta_mean),
        part(&real.sd, &fake.sd, loss.l_sd, cfg.delta_sd),
    )
}

/// Discrepancy between labels and predictions, both in [0, 1].
pub fn class_loss(labels: &[f64], predicted: &[f64]) -> Result<f64> {
    class_loss_with(labels, predicted, ClassLossKind::AbsoluteDifference)
}

pub fn class_loss_with(labels: &[f64], predicted: &[f64], kind: ClassLossKind) -> Result<f64> {
    if labels.len() != predicted.len() {
        return Err(Error::Shape(format!(
            "{} labels but {} predictions",
            labels.len(),
            predicted.len()
        )));
    }
    non_empty(labels, "classification loss")?;
    let terms: Vec<f64> = labels
        .iter()
        .zip(predicted)
        .map(|(&t, &p)| match kind {
            ClassLossKind::AbsoluteDifference => (t - p).abs(),
            ClassLossKind::CrossEntropy => -(t * (p + LOG_EPS).ln() + (1.0 - t) * (1.0 - p + LOG_EPS).ln()),
        })
        .collect();
    Ok(mean(&terms))
}

/// Gradients of the classification loss w.r.t. labels and predictions.
pub fn class_loss_grad(labels: &[f64], predicted: &[f64], kind: ClassLossKind) -> (Vec<f64>, Vec<f64>) {
    let n = labels.len() as f64;
    labels
        .iter()
        .zip(predicted)
        .map(|(&t, &p)| match kind {
            ClassLossKind::AbsoluteDifference => {
                let s = sign(t - p) / n;
                (s, -s)
            }
            ClassLossKind::CrossEntropy => (
                ((1.0 - p + LOG_EPS).ln() - (p + LOG_EPS).ln()) / n,
                (-t / (p + LOG_EPS) + (1.0 - t) / (1.0 - p + LOG_EPS)) / n,
            ),
        })
        .unzip()
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
