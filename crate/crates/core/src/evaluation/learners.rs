//! Small deterministic learners for the model-compatibility test.
//!
//! Each algorithm has ten fixed parameter settings; there is no search.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{ColumnKind, LabelTask, TableSchema};
use crate::table::{RawTable, Value};

/// Maximum depths of the tree roster.
pub const TREE_DEPTHS: [usize; 10] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10];
/// L2 penalties of the linear roster.
pub const LINEAR_PENALTIES: [f64; 10] = [1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 0.1, 0.3, 1.0, 3.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// CART tree: Gini splits for classification, variance splits for regression.
    DecisionTree,
    /// L2-regularized logistic regression, or ridge regression.
    Linear,
}

impl Algorithm {
    pub fn id(self) -> &'static str {
        match self {
            Algorithm::DecisionTree => "decision_tree",
            Algorithm::Linear => "linear",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RosterEntry {
    pub algorithm: Algorithm,
    /// Index into the algorithm's parameter table.
    pub param: usize,
}

impl RosterEntry {
    pub fn param_label(&self) -> String {
        match self.algorithm {
            Algorithm::DecisionTree => format!("max_depth={}", TREE_DEPTHS[self.param]),
            Algorithm::Linear => format!("l2={}", LINEAR_PENALTIES[self.param]),
        }
    }
}

/// Both algorithms with all ten settings.
pub fn default_roster() -> Vec<RosterEntry> {
    [Algorithm::DecisionTree, Algorithm::Linear]
        .into_iter()
        .flat_map(|algorithm| (0..10).map(move |param| RosterEntry { algorithm, param }))
        .collect()
}

/// Attribute features of every row, label excluded. Numeric columns are
/// scaled by their declared range; categoricals are one-hot.
pub fn feature_matrix(table: &RawTable) -> Vec<Vec<f64>> {
    let schema = table.schema();
    let label = schema.label_index();
    table
        .rows()
        .iter()
        .map(|row| {
            let mut out = Vec::new();
            for (j, col) in schema.columns().iter().enumerate() {
                if j == label {
                    continue;
                }
                match (&col.kind, &row[j]) {
                    (ColumnKind::Categorical, Value::Category(c)) => {
                        let idx = col.category_index(c);
                        out.extend((0..col.categories.len()).map(|k| if Some(k) == idx { 1.0 } else { 0.0 }));
                    }
                    (_, v) => {
                        let x = v.as_number().unwrap_or(col.min);
                        out.push((x - col.min) / (col.max - col.min));
                    }
                }
            }
            out
        })
        .collect()
}

pub(crate) fn task_of(schema: &TableSchema) -> LabelTask {
    schema.label().task
}

#[derive(Debug, Clone)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

impl Node {
    fn predict(&self, x: &[f64]) -> f64 {
        match self {
            Node::Leaf(v) => *v,
            Node::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                if x[*feature] <= *threshold {
                    left.predict(x)
                } else {
                    right.predict(x)
                }
            }
        }
    }
}

/// Impurity of a node with `n` samples, label sum `s` and sum of squares `q`.
fn impurity(n: f64, s: f64, q: f64, classify: bool) -> f64 {
    if classify {
        let p = s / n;
        n * 2.0 * p * (1.0 - p)
    } else {
        q - s * s / n
    }
}

fn grow(x: &[Vec<f64>], y: &[f64], rows: &mut [usize], depth: usize, classify: bool) -> Node {
    let n = rows.len() as f64;
    let s: f64 = rows.iter().map(|&i| y[i]).sum();
    let q: f64 = rows.iter().map(|&i| y[i] * y[i]).sum();
    let mean = s / n;
    let parent = impurity(n, s, q, classify);
    if depth == 0 || rows.len() < 2 || parent <= 1e-12 {
        return Node::Leaf(mean);
    }
    let dims = x[rows[0]].len();
    let mut best: Option<(f64, usize, f64)> = None;
    for f in 0..dims {
        rows.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
        let (mut ls, mut lq) = (0.0, 0.0);
        for k in 0..rows.len() - 1 {
            let yi = y[rows[k]];
            ls += yi;
            lq += yi * yi;
            let (cur, next) = (x[rows[k]][f], x[rows[k + 1]][f]);
            if cur == next {
                continue;
            }
            let nl = (k + 1) as f64;
            let child = impurity(nl, ls, lq, classify) + impurity(n - nl, s - ls, q - lq, classify);
            let gain = parent - child;
            if gain > 1e-12 && best.is_none_or(|(g, _, _)| gain > g) {
                best = Some((gain, f, 0.5 * (cur + next)));
            }
        }
    }
    let Some((_, feature, threshold)) = best else {
        return Node::Leaf(mean);
    };
    let (mut left, mut right): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| x[i][feature] <= threshold);
    Node::Split {
        feature,
        threshold,
        left: Box::new(grow(x, y, &mut left, depth - 1, classify)),
        right: Box::new(grow(x, y, &mut right, depth - 1, classify)),
    }
}

/// Depth-bounded CART tree. Leaves hold the positive fraction
/// (classification) or the mean target (regression).
#[derive(Debug, Clone)]
pub struct DecisionTree {
    root: Node,
}

impl DecisionTree {
    pub fn fit(x: &[Vec<f64>], y: &[f64], max_depth: usize, classify: bool) -> Result<Self> {
        check_fit_input(x, y)?;
        let mut rows: Vec<usize> = (0..x.len()).collect();
        Ok(Self {
            root: grow(x, y, &mut rows, max_depth, classify),
        })
    }

    pub fn predict(&self, x: &[Vec<f64>]) -> Vec<f64> {
        x.iter().map(|r| self.root.predict(r)).collect()
    }
}

fn check_fit_input(x: &[Vec<f64>], y: &[f64]) -> Result<()> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::Evaluation(format!(
            "learner needs matching non-empty inputs, got {} rows and {} targets",
            x.len(),
            y.len()
        )));
    }
    Ok(())
}

/// Linear model with intercept; the intercept is not penalized.
#[derive(Debug, Clone)]
pub struct LinearModel {
    weights: Vec<f64>,
    bias: f64,
    logistic: bool,
}

fn design(x: &[Vec<f64>]) -> DMatrix<f64> {
    let dims = x[0].len();
    DMatrix::from_fn(x.len(), dims + 1, |i, j| if j == dims { 1.0 } else { x[i][j] })
}

impl LinearModel {
    /// Ridge regression: minimizes `mean (y - w.x - b)^2 + l2 |w|^2`.
    pub fn fit_ridge(x: &[Vec<f64>], y: &[f64], l2: f64) -> Result<Self> {
        check_fit_input(x, y)?;
        let a = design(x);
        let n = x.len() as f64;
        let dims = a.ncols();
        let mut h = a.transpose() * &a / n;
        for j in 0..dims - 1 {
            h[(j, j)] += l2;
        }
        let rhs = a.transpose() * DVector::from_column_slice(y) / n;
        let sol = solve(h, rhs)?;
        Ok(Self::from_solution(&sol, false))
    }

    /// Logistic regression by damped Newton iterations on
    /// `mean log-loss + l2/2 |w|^2`.
    pub fn fit_logistic(x: &[Vec<f64>], y: &[f64], l2: f64) -> Result<Self> {
        check_fit_input(x, y)?;
        let a = design(x);
        let n = x.len() as f64;
        let dims = a.ncols();
        let yv = DVector::from_column_slice(y);
        let objective = |beta: &DVector<f64>| -> f64 {
            let z = &a * beta;
            let mut loss = 0.0;
            for (zi, yi) in z.iter().zip(yv.iter()) {
                // log(1 + e^z) - y z, computed stably.
                loss += zi.max(0.0) + (-zi.abs()).exp().ln_1p() - yi * zi;
            }
            let pen: f64 = beta.iter().take(dims - 1).map(|b| b * b).sum();
            loss / n + 0.5 * l2 * pen
        };
        let mut beta = DVector::zeros(dims);
        let mut current = objective(&beta);
        for _ in 0..100 {
            let z = &a * &beta;
            let p: Vec<f64> = z.iter().map(|&v| crate::nets::sigmoid(v)).collect();
            let mut grad = a.transpose() * (DVector::from_vec(p.clone()) - &yv) / n;
            let mut weighted = a.clone();
            for (i, q) in p.iter().enumerate() {
                weighted.row_mut(i).scale_mut((q * (1.0 - q)).max(1e-12));
            }
            let mut hess = a.transpose() * weighted / n;
            for j in 0..dims - 1 {
                grad[j] += l2 * beta[j];
                hess[(j, j)] += l2;
            }
            hess[(dims - 1, dims - 1)] += 1e-10;
            let step = solve(hess, grad.clone())?;
            let mut t = 1.0;
            let mut accepted = false;
            while t > 1e-8 {
                let cand = &beta - &step * t;
                let val = objective(&cand);
                if val <= current {
                    let done = current - val < 1e-12;
                    beta = cand;
                    current = val;
                    accepted = !done;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        Ok(Self::from_solution(&beta, true))
    }

    fn from_solution(sol: &DVector<f64>, logistic: bool) -> Self {
        let dims = sol.len() - 1;
        Self {
            weights: sol.iter().take(dims).copied().collect(),
            bias: sol[dims],
            logistic,
        }
    }

    pub fn predict(&self, x: &[Vec<f64>]) -> Vec<f64> {
        x.iter()
            .map(|r| {
                let z = self.bias + r.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>();
                if self.logistic {
                    crate::nets::sigmoid(z)
                } else {
                    z
                }
            })
            .collect()
    }
}

fn solve(h: DMatrix<f64>, rhs: DVector<f64>) -> Result<DVector<f64>> {
    if let Some(ch) = h.clone().cholesky() {
        return Ok(ch.solve(&rhs));
    }
    h.lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Evaluation("singular system in linear learner".into()))
}

/// Fits `entry` on `(x, y)` and predicts `test`.
pub fn fit_predict(entry: &RosterEntry, task: LabelTask, x: &[Vec<f64>], y: &[f64], test: &[Vec<f64>]) -> Result<Vec<f64>> {
    if entry.param >= 10 {
        return Err(Error::InvalidArgument(format!("roster parameter index {} out of range", entry.param)));
    }
    let classify = task == LabelTask::Classification;
    Ok(match entry.algorithm {
        Algorithm::DecisionTree => DecisionTree::fit(x, y, TREE_DEPTHS[entry.param], classify)?.predict(test),
        Algorithm::Linear if classify => LinearModel::fit_logistic(x, y, LINEAR_PENALTIES[entry.param])?.predict(test),
        Algorithm::Linear => LinearModel::fit_ridge(x, y, LINEAR_PENALTIES[entry.param])?.predict(test),
    })
}

/// F-1 of the positive class; a score of at least 0.5 predicts positive.
/// Zero when there are no true positives.
pub fn f1_score(truth: &[f64], scores: &[f64]) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
    for (&t, &s) in truth.iter().zip(scores) {
        match (t > 0.5, s >= 0.5) {
            (true, true) => tp += 1.0,
            (false, true) => fp += 1.0,
            (true, false) => fneg += 1.0,
            _ => {}
        }
    }
    if tp == 0.0 {
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fneg)
    }
}

pub const MRE_EPS: f64 = 1e-8;

/// Mean of `|prediction - truth| / max(|truth|, 1e-8)`.
pub fn mean_relative_error(truth: &[f64], pred: &[f64]) -> f64 {
    let total: f64 = truth
        .iter()
        .zip(pred)
        .map(|(&t, &p)| (p - t).abs() / t.abs().max(MRE_EPS))
        .sum();
    total / truth.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roster_has_twenty_entries() {
        let r = default_roster();
        assert_eq!(r.len(), 20);
        assert_eq!(r[0].param_label(), "max_depth=1");
        assert_eq!(r[19].param_label(), "l2=3");
    }

    #[test]
    fn tree_learns_threshold() {
        let x: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64 / 100.0, ((i * 7) % 13) as f64]).collect();
        let y: Vec<f64> = x.iter().map(|r| if r[0] > 0.42 { 1.0 } else { 0.0 }).collect();
        let t = DecisionTree::fit(&x, &y, 1, true).unwrap();
        assert_eq!(t.predict(&x), y);
        let stump = DecisionTree::fit(&x, &y, 0, true).unwrap();
        assert!(stump.predict(&x).iter().all(|p| (*p - 0.57).abs() < 1e-12));
    }

    #[test]
    fn regression_tree_fits_steps() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..40).map(|i| (i / 10) as f64).collect();
        let t = DecisionTree::fit(&x, &y, 2, false).unwrap();
        assert_eq!(t.predict(&x), y);
    }

    #[test]
    fn ridge_recovers_line() {
        let x: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64 / 10.0]).collect();
        let y: Vec<f64> = x.iter().map(|r| 3.0 * r[0] - 1.0).collect();
        let m = LinearModel::fit_ridge(&x, &y, 1e-10).unwrap();
        for (p, t) in m.predict(&x).iter().zip(&y) {
            assert!((p - t).abs() < 1e-6);
        }
    }

    #[test]
    fn logistic_separates_and_is_regularized() {
        let x: Vec<Vec<f64>> = (0..200).map(|i| vec![(i % 20) as f64 / 20.0, (i / 20) as f64 / 10.0]).collect();
        let y: Vec<f64> = x.iter().map(|r| if r[0] + r[1] > 1.0 { 1.0 } else { 0.0 }).collect();
        let m = LinearModel::fit_logistic(&x, &y, 1e-4).unwrap();
        assert!(f1_score(&y, &m.predict(&x)) > 0.95);
        let heavy = LinearModel::fit_logistic(&x, &y, 3.0).unwrap();
        let norm = |m: &LinearModel| m.weights.iter().map(|w| w * w).sum::<f64>();
        assert!(norm(&heavy) < norm(&m));
    }

    #[test]
    fn f1_and_mre_examples() {
        assert_eq!(f1_score(&[1.0, 0.0, 1.0, 0.0], &[0.9, 0.1, 0.5, 0.49]), 1.0);
        // tp 1, fp 1, fn 1
        assert!((f1_score(&[1.0, 0.0, 1.0], &[0.7, 0.6, 0.2]) - 0.5).abs() < 1e-12);
        assert_eq!(f1_score(&[1.0, 1.0], &[0.0, 0.0]), 0.0);
        assert!((mean_relative_error(&[2.0, -4.0], &[3.0, -2.0]) - 0.5).abs() < 1e-12);
        assert_eq!(mean_relative_error(&[0.0], &[1e-8]), 1.0);
    }
}
