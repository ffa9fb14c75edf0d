//! Privacy and utility evaluation of a comparison table against the original.

pub mod learners;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{ColumnKind, LabelTask, TableSchema};
use crate::table::{RawTable, Value};
pub use learners::{default_roster, Algorithm, RosterEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DcrSubset {
    QidPlusSensitive,
    SensitiveOnly,
}

impl DcrSubset {
    pub fn id(self) -> &'static str {
        match self {
            DcrSubset::QidPlusSensitive => "qid_plus_sensitive",
            DcrSubset::SensitiveOnly => "sensitive_only",
        }
    }

    pub fn columns(self, schema: &TableSchema) -> Vec<usize> {
        match self {
            DcrSubset::QidPlusSensitive => (0..schema.len()).collect(),
            DcrSubset::SensitiveOnly => schema.sensitive_indices(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DcrReport {
    pub mean: f64,
    pub std: f64,
    pub subset: DcrSubset,
}

fn same_schema(a: &RawTable, b: &RawTable) -> Result<()> {
    if a.schema() != b.schema() {
        return Err(Error::Schema(format!(
            "tables have different schemas: [{}] vs [{}]",
            a.schema().names().join(","),
            b.schema().names().join(",")
        )));
    }
    Ok(())
}

/// Attribute-wise normalizer fitted on the original table: numeric columns
/// map the original's observed min/max onto [0, 1], categoricals use
/// `index / (categories - 1)`.
struct Normalizer {
    columns: Vec<usize>,
    shift: Vec<f64>,
    scale: Vec<f64>,
}

impl Normalizer {
    fn fit(original: &RawTable, columns: Vec<usize>) -> Self {
        let schema = original.schema();
        let mut shift = Vec::new();
        let mut scale = Vec::new();
        for &j in &columns {
            let col = schema.column(j);
            if col.kind == ColumnKind::Categorical {
                shift.push(0.0);
                scale.push((col.categories.len() as f64 - 1.0).max(1.0));
            } else {
                let vals = original.column_values(j);
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                shift.push(lo);
                scale.push(if hi > lo { hi - lo } else { 1.0 });
            }
        }
        Self { columns, shift, scale }
    }

    fn apply(&self, table: &RawTable) -> Vec<Vec<f64>> {
        let cols: Vec<Vec<f64>> = self.columns.iter().map(|&j| table.column_values(j)).collect();
        (0..table.len())
            .map(|i| {
                (0..self.columns.len())
                    .map(|k| (cols[k][i] - self.shift[k]) / self.scale[k])
                    .collect()
            })
            .collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and distance of the nearest candidate; ties go to the lowest index.
fn nearest(point: &[f64], candidates: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in candidates.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    (best.0, best.1.sqrt())
}

fn normalized_pair(original: &RawTable, comparison: &RawTable, subset: DcrSubset) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    same_schema(original, comparison)?;
    let columns = subset.columns(original.schema());
    if columns.is_empty() {
        return Err(Error::Evaluation(format!("attribute subset {} is empty", subset.id())));
    }
    let norm = Normalizer::fit(original, columns);
    Ok((norm.apply(original), norm.apply(comparison)))
}

/// Distance from every original record to its closest comparison record;
/// mean and population standard deviation.
pub fn dcr(original: &RawTable, comparison: &RawTable, subset: DcrSubset) -> Result<DcrReport> {
    if original.is_empty() || comparison.is_empty() {
        return Err(Error::Evaluation("distance to closest record needs non-empty tables".into()));
    }
    let (orig, comp) = normalized_pair(original, comparison, subset)?;
    let dists: Vec<f64> = orig.par_iter().map(|r| nearest(r, &comp).1).collect();
    let (mean, std) = mean_std(&dists);
    Ok(DcrReport { mean, std, subset })
}

pub(crate) fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExhibitPair {
    pub real_index: usize,
    pub synthetic_index: usize,
    pub distance: f64,
    pub real: Vec<Value>,
    pub synthetic: Vec<Value>,
}

/// Pairs a seeded sample of real records with their closest synthetic
/// records over all attributes.
pub fn nearest_real_exhibit(original: &RawTable, synthetic: &RawTable, sample_size: usize, seed: u64) -> Result<Vec<ExhibitPair>> {
    if synthetic.is_empty() {
        return Err(Error::Evaluation("exhibit needs a non-empty synthetic table".into()));
    }
    let (orig, synth) = normalized_pair(original, synthetic, DcrSubset::QidPlusSensitive)?;
    let mut picks: Vec<usize> = (0..original.len()).collect();
    if sample_size < picks.len() {
        picks.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        picks.truncate(sample_size);
        picks.sort_unstable();
    }
    Ok(picks
        .into_iter()
        .map(|i| {
            let (j, distance) = nearest(&orig[i], &synth);
            ExhibitPair {
                real_index: i,
                synthetic_index: j,
                distance,
                real: original.row(i).to_vec(),
                synthetic: synthetic.row(j).to_vec(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfReport {
    pub attribute: String,
    pub original: Vec<f64>,
    pub comparison: Vec<f64>,
    pub ks_statistic: f64,
}

impl CdfReport {
    /// `(value, cdf_original, cdf_comparison)` at every distinct value.
    pub fn points(&self) -> Vec<(f64, f64, f64)> {
        let mut values: Vec<f64> = self.original.iter().chain(&self.comparison).copied().collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        values
            .into_iter()
            .map(|v| (v, ecdf(&self.original, v), ecdf(&self.comparison, v)))
            .collect()
    }

    pub fn write_points_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv_writer(out);
        w.write_record(["value", "cdf_original", "cdf_comparison"])?;
        for (v, a, b) in self.points() {
            w.write_record([v.to_string(), a.to_string(), b.to_string()])?;
        }
        flush(w)
    }
}

/// Fraction of the sorted sample at or below `v`.
fn ecdf(sorted: &[f64], v: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    sorted.partition_point(|x| *x <= v) as f64 / sorted.len() as f64
}

/// Two-sample Kolmogorov-Smirnov statistic: the largest gap between the
/// two empirical CDFs.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return if a.len() == b.len() { 0.0 } else { 1.0 };
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut gap) = (0, 0, 0.0f64);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        gap = gap.max((i as f64 / na - j as f64 / nb).abs());
    }
    gap
}

/// Empirical CDFs of one attribute; categoricals compare category indices.
pub fn cdf_compare(original: &RawTable, comparison: &RawTable, attribute: &str) -> Result<CdfReport> {
    same_schema(original, comparison)?;
    let idx = original
        .schema()
        .index_of(attribute)
        .ok_or_else(|| Error::Evaluation(format!("unknown attribute `{attribute}`")))?;
    let mut a = original.column_values(idx);
    let mut b = comparison.column_values(idx);
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let ks_statistic = ks_statistic(&a, &b);
    Ok(CdfReport {
        attribute: attribute.to_string(),
        original: a,
        comparison: b,
        ks_statistic,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    F1,
    Mre,
}

impl Metric {
    pub fn id(self) -> &'static str {
        match self {
            Metric::F1 => "f1",
            Metric::Mre => "mre",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompatPoint {
    pub algorithm: Algorithm,
    pub param: String,
    /// Score of the model trained on the original table.
    pub x: f64,
    /// Score of the model trained on the comparison table.
    pub y: f64,
    pub metric: Metric,
}

/// Trains every roster entry on both training tables and scores both on
/// the same test table.
pub fn model_compat(
    original_train: &RawTable,
    comparison_train: &RawTable,
    test: &RawTable,
    task: LabelTask,
    roster: &[RosterEntry],
) -> Result<Vec<CompatPoint>> {
    same_schema(original_train, comparison_train)?;
    same_schema(original_train, test)?;
    let declared = learners::task_of(original_train.schema());
    if declared != task {
        return Err(Error::Evaluation(format!(
            "label `{}` is declared for {declared:?}, not {task:?}",
            original_train.schema().label().name
        )));
    }
    if original_train.is_empty() || comparison_train.is_empty() || test.is_empty() {
        return Err(Error::Evaluation("model compatibility needs non-empty tables".into()));
    }
    let truth = test.label_values();
    if task == LabelTask::Classification {
        let pos = truth.iter().filter(|v| **v > 0.5).count();
        if pos == 0 || pos == truth.len() {
            return Err(Error::Evaluation(
                "test labels are all one class; F-1 is undefined".into(),
            ));
        }
    }
    let metric = match task {
        LabelTask::Classification => Metric::F1,
        LabelTask::Regression => Metric::Mre,
    };
    let score = |pred: &[f64]| match metric {
        Metric::F1 => learners::f1_score(&truth, pred),
        Metric::Mre => learners::mean_relative_error(&truth, pred),
    };
    let x_test = learners::feature_matrix(test);
    let x_orig = learners::feature_matrix(original_train);
    let y_orig = original_train.label_values();
    let x_comp = learners::feature_matrix(comparison_train);
    let y_comp = comparison_train.label_values();

    roster
        .par_iter()
        .map(|entry| {
            let px = learners::fit_predict(entry, task, &x_orig, &y_orig, &x_test)?;
            let py = learners::fit_predict(entry, task, &x_comp, &y_comp, &x_test)?;
            Ok(CompatPoint {
                algorithm: entry.algorithm,
                param: entry.param_label(),
                x: score(&px),
                y: score(&py),
                metric,
            })
        })
        .collect()
}

fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out)
}

fn flush<W: Write>(mut w: csv::Writer<W>) -> Result<()> {
    w.flush().map_err(|e| Error::io("<report writer>", e))
}

pub fn write_dcr_csv<W: Write>(reports: &[DcrReport], out: W) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(["subset", "mean", "std"])?;
    for r in reports {
        w.write_record([r.subset.id().to_string(), r.mean.to_string(), r.std.to_string()])?;
    }
    flush(w)
}

pub fn write_ks_csv<W: Write>(reports: &[CdfReport], out: W) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(["attribute", "ks"])?;
    for r in reports {
        w.write_record([r.attribute.clone(), r.ks_statistic.to_string()])?;
    }
    flush(w)
}

pub fn write_compat_csv<W: Write>(points: &[CompatPoint], out: W) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(["algorithm", "param", "x", "y", "metric"])?;
    for p in points {
        w.write_record([
            p.algorithm.id().to_string(),
            p.param.clone(),
            p.x.to_string(),
            p.y.to_string(),
            p.metric.id().to_string(),
        ])?;
    }
    flush(w)
}

pub fn write_exhibit_csv<W: Write>(schema: &TableSchema, pairs: &[ExhibitPair], out: W) -> Result<()> {
    let mut w = csv_writer(out);
    let mut header = vec!["real_index".to_string(), "synthetic_index".to_string(), "distance".to_string()];
    header.extend(schema.names().iter().map(|n| format!("real_{n}")));
    header.extend(schema.names().iter().map(|n| format!("synthetic_{n}")));
    w.write_record(&header)?;
    for p in pairs {
        let mut rec = vec![p.real_index.to_string(), p.synthetic_index.to_string(), p.distance.to_string()];
        rec.extend(p.real.iter().map(|v| v.to_string()));
        rec.extend(p.synthetic.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    flush(w)
}
