//! Seeded rule-labeled toy table used for smoke runs and desk-scale checks.
//!
//! Sixteen columns: fifteen attributes of mixed kinds plus a binary label
//! `y = 1[a1 + a2 > 1]` on the two unit-range attributes `a1` and `a2`.
//! `age` and `zone` are the quasi-identifiers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::schema::{ColumnDecl, ColumnKind, LabelTask, TableSchema};
use crate::table::{RawTable, Value};

pub const TOY_TRAIN_ROWS: usize = 2000;
pub const TOY_TEST_ROWS: usize = 400;

const ZONES: [&str; 8] = ["z0", "z1", "z2", "z3", "z4", "z5", "z6", "z7"];
const DEPTS: [&str; 5] = ["ops", "eng", "sales", "legal", "hr"];
const GRADES: [&str; 4] = ["g1", "g2", "g3", "g4"];

pub fn toy_declarations() -> Vec<ColumnDecl> {
    use ColumnKind::*;
    vec![
        ColumnDecl::new("a1", Continuous).range(0.0, 1.0),
        ColumnDecl::new("a2", Continuous).range(0.0, 1.0),
        ColumnDecl::new("age", Discrete).range(18.0, 90.0).qid(),
        ColumnDecl::new("zone", Categorical).categories(&ZONES).qid(),
        ColumnDecl::new("income", Continuous).range(10.0, 200.0),
        ColumnDecl::new("hours", Discrete).range(0.0, 80.0),
        ColumnDecl::new("tenure", Discrete).range(0.0, 40.0),
        ColumnDecl::new("score", Continuous).range(0.0, 100.0),
        ColumnDecl::new("dept", Categorical).categories(&DEPTS),
        ColumnDecl::new("grade", Categorical).categories(&GRADES),
        ColumnDecl::new("x1", Continuous).range(-3.0, 3.0),
        ColumnDecl::new("x2", Continuous).range(0.0, 10.0),
        ColumnDecl::new("x3", Continuous).range(-1.0, 1.0),
        ColumnDecl::new("flag", Categorical).categories(&["no", "yes"]),
        ColumnDecl::new("children", Discrete).range(0.0, 5.0),
        ColumnDecl::new("y", Label).task(LabelTask::Classification),
    ]
}

pub fn toy_schema() -> TableSchema {
    let decls = toy_declarations();
    let header: Vec<String> = decls.iter().map(|d| d.name.clone()).collect();
    TableSchema::build(&header, &decls, &[]).expect("toy schema is valid")
}

/// `n` independent toy records.
pub fn toy_table(n: usize, seed: u64) -> RawTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let rows = (0..n)
        .map(|_| {
            let a1: f64 = rng.random();
            let a2: f64 = rng.random();
            let age = rng.random_range(18..=90) as f64;
            let zone = ZONES[rng.random_range(0..ZONES.len())];
            let income = (20.0 + 1.6 * (age - 18.0) + 15.0 * std.sample(&mut rng)).clamp(10.0, 200.0);
            let hours = (40.0 + 8.0 * std.sample(&mut rng)).round().clamp(0.0, 80.0);
            let tenure = ((age - 18.0) * rng.random::<f64>()).round().min(40.0);
            let score = (60.0 + 15.0 * std.sample(&mut rng)).clamp(0.0, 100.0);
            let dept = DEPTS[rng.random_range(0..DEPTS.len())];
            let grade = GRADES[(((income - 10.0) / 190.0) * 4.0).floor().min(3.0) as usize];
            let x1 = std.sample(&mut rng).clamp(-3.0, 3.0);
            let x2 = 10.0 * rng.random::<f64>().powi(2);
            let x3 = (a1 - a2 + 0.2 * std.sample(&mut rng)).clamp(-1.0, 1.0);
            let flag = if rng.random_bool(0.3) { "yes" } else { "no" };
            let children = rng.random_range(0..=5) as f64;
            let y = if a1 + a2 > 1.0 { 1.0 } else { 0.0 };
            vec![
                Value::Number(a1),
                Value::Number(a2),
                Value::Number(age),
                Value::Category(zone.into()),
                Value::Number(income),
                Value::Number(hours),
                Value::Number(tenure),
                Value::Number(score),
                Value::Category(dept.into()),
                Value::Category(grade.into()),
                Value::Number(x1),
                Value::Number(x2),
                Value::Number(x3),
                Value::Category(flag.into()),
                Value::Number(children),
                Value::Number(y),
            ]
        })
        .collect();
    RawTable::new(toy_schema(), rows).expect("toy rows match the schema")
}

/// Training table of 2000 rows and a disjoint 400-row test table.
pub fn toy_dataset(seed: u64) -> (RawTable, RawTable) {
    let all = toy_table(TOY_TRAIN_ROWS + TOY_TEST_ROWS, seed);
    let train: Vec<usize> = (0..TOY_TRAIN_ROWS).collect();
    let test: Vec<usize> = (TOY_TRAIN_ROWS..all.len()).collect();
    (all.select(&train), all.select(&test))
}

/// Fraction of records whose label disagrees with `1[a1 + a2 > 1]`,
/// ignoring records with `|a1 + a2 - 1| <= margin`. Returns 0 when every
/// record falls inside the margin band.
pub fn label_rule_violation_rate(table: &RawTable, margin: f64) -> Result<f64> {
    let s = table.schema();
    let find = |name: &str| {
        s.index_of(name)
            .ok_or_else(|| Error::Schema(format!("label rule needs column '{name}'")))
    };
    let a1 = find("a1")?;
    let a2 = find("a2")?;
    let y = s.label_index();
    let (mut counted, mut bad) = (0usize, 0usize);
    for row in table.rows() {
        let sum = row[a1].as_number().unwrap_or(0.0) + row[a2].as_number().unwrap_or(0.0);
        if (sum - 1.0).abs() <= margin {
            continue;
        }
        counted += 1;
        let expected = sum > 1.0;
        let got = row[y].as_number().unwrap_or(0.0) > 0.5;
        if expected != got {
            bad += 1;
        }
    }
    Ok(if counted == 0 { 0.0 } else { bad as f64 / counted as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_rule() {
        let (train, test) = toy_dataset(3);
        assert_eq!(train.len(), 2000);
        assert_eq!(test.len(), 400);
        assert_eq!(train.schema().len(), 16);
        assert_eq!(train.schema().qid_indices().len(), 2);
        assert_eq!(label_rule_violation_rate(&train, 0.0).unwrap(), 0.0);
        let pos = train.label_values().iter().filter(|v| **v > 0.5).count();
        assert!((800..1200).contains(&pos), "{pos}");
    }

    #[test]
    fn seeded() {
        assert_eq!(toy_table(50, 9), toy_table(50, 9));
        assert_ne!(toy_table(50, 9), toy_table(50, 10));
    }

    #[test]
    fn violation_rate_counts_flipped_labels() {
        let t = toy_table(200, 1);
        let y = t.schema().label_index();
        let rows: Vec<Vec<Value>> = t
            .rows()
            .iter()
            .map(|r| {
                let mut r = r.clone();
                let v = r[y].as_number().unwrap();
                r[y] = Value::Number(1.0 - v);
                r
            })
            .collect();
        let flipped = RawTable::new(t.schema().clone(), rows).unwrap();
        assert_eq!(label_rule_violation_rate(&flipped, 0.05).unwrap(), 1.0);
    }
}
