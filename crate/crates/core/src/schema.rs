//! Column declarations and the validated table schema.
//!
//! A schema fixes the canonical attribute order (the CSV header order), the
//! kind of each attribute, its value range or category list, and which
//! attributes are quasi-identifiers. Exactly one column is the label.
//!
//! Declarations are read from a TOML file with one `[[column]]` table per
//! attribute; see the README for the grammar.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    Discrete,
    Categorical,
    Label,
}

/// What the label column predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelTask {
    /// Binary label with values 0 and 1.
    #[default]
    Classification,
    /// Real-valued label with a min/max range.
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    /// Lower bound for numeric columns (continuous, discrete, label).
    pub min: f64,
    /// Upper bound for numeric columns.
    pub max: f64,
    /// Ordered category list; empty unless `kind` is categorical.
    pub categories: Vec<String>,
    pub is_qid: bool,
    /// Only meaningful when `kind` is `Label`.
    pub task: LabelTask,
}

impl ColumnSpec {
    pub fn is_numeric(&self) -> bool {
        self.kind != ColumnKind::Categorical
    }

    /// Whether decoded values are snapped to integers.
    pub fn is_integral(&self) -> bool {
        match self.kind {
            ColumnKind::Discrete => true,
            ColumnKind::Label => self.task == LabelTask::Classification,
            _ => false,
        }
    }

    pub fn category_index(&self, value: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == value)
    }
}

/// One `[[column]]` entry of a declaration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnDecl {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default)]
    pub qid: bool,
    #[serde(default)]
    pub min: Option<f64>,
    #[serde(default)]
    pub max: Option<f64>,
    #[serde(default)]
    pub categories: Option<Vec<String>>,
    #[serde(default)]
    pub task: Option<LabelTask>,
}

impl ColumnDecl {
    pub fn new(name: &str, kind: ColumnKind) -> Self {
        Self {
            name: name.to_string(),
            kind,
            qid: false,
            min: None,
            max: None,
            categories: None,
            task: None,
        }
    }

    pub fn qid(mut self) -> Self {
        self.qid = true;
        self
    }

    pub fn range(mut self, min: f64, max: f64) -> Self {
        self.min = Some(min);
        self.max = Some(max);
        self
    }

    pub fn categories<S: AsRef<str>>(mut self, cats: &[S]) -> Self {
        self.categories = Some(cats.iter().map(|c| c.as_ref().to_string()).collect());
        self
    }

    pub fn task(mut self, task: LabelTask) -> Self {
        self.task = Some(task);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaDecl {
    #[serde(rename = "column")]
    pub columns: Vec<ColumnDecl>,
}

impl SchemaDecl {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Schema(format!("bad declaration file: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
            .map_err(|e| Error::Schema(format!("{}: {}", path.display(), e)))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("declarations serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSchema {
    columns: Vec<ColumnSpec>,
    label_index: usize,
}

impl TableSchema {
    /// Builds a schema for `header` from per-column declarations.
    ///
    /// Missing ranges and category lists are inferred from `data` (raw
    /// string cells, one row per record, in header order). Inferred
    /// categories are sorted; declared ones keep their given order.
    pub fn build<S: AsRef<str>>(
        header: &[S],
        decls: &[ColumnDecl],
        data: &[Vec<String>],
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        for name in header {
            if !seen.insert(name.as_ref()) {
                return Err(Error::Schema(format!(
                    "duplicate column name `{}`",
                    name.as_ref()
                )));
            }
        }
        let mut decl_names = HashSet::new();
        for d in decls {
            if !decl_names.insert(d.name.as_str()) {
                return Err(Error::Schema(format!(
                    "column `{}` declared more than once",
                    d.name
                )));
            }
            if !seen.contains(d.name.as_str()) {
                return Err(Error::Schema(format!(
                    "declared column `{}` is not in the header",
                    d.name
                )));
            }
        }

        let mut columns = Vec::with_capacity(header.len());
        for (idx, name) in header.iter().enumerate() {
            let name = name.as_ref();
            let decl = decls
                .iter()
                .find(|d| d.name == name)
                .ok_or_else(|| Error::Schema(format!("column `{name}` has no declaration")))?;
            let cells = || data.iter().filter_map(move |row| row.get(idx));
            columns.push(resolve_column(decl, cells)?);
        }
        Self::from_columns(columns)
    }

    /// Validates fully specified columns.
    pub fn from_columns(columns: Vec<ColumnSpec>) -> Result<Self> {
        let mut seen = HashSet::new();
        for c in &columns {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Schema(format!("duplicate column name `{}`", c.name)));
            }
            validate_column(c)?;
        }
        let labels: Vec<usize> = columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.kind == ColumnKind::Label)
            .map(|(i, _)| i)
            .collect();
        let label_index = match labels.as_slice() {
            [one] => *one,
            [] => return Err(Error::Schema("no label column declared".into())),
            _ => {
                return Err(Error::Schema(format!(
                    "{} label columns declared, expected exactly one",
                    labels.len()
                )))
            }
        };
        Ok(Self {
            columns,
            label_index,
        })
    }

    pub fn columns(&self) -> &[ColumnSpec] {
        &self.columns
    }

    pub fn column(&self, idx: usize) -> &ColumnSpec {
        &self.columns[idx]
    }

    /// Attribute count `m`.
    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn label_index(&self) -> usize {
        self.label_index
    }

    pub fn label(&self) -> &ColumnSpec {
        &self.columns[self.label_index]
    }

    pub fn qid_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.columns[i].is_qid).collect()
    }

    /// Every non-QID attribute, the label included.
    pub fn sensitive_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.columns[i].is_qid).collect()
    }

    /// Hex SHA-256 over the canonical JSON form; checkpoints pin it.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("schema serializes");
        hex::encode(Sha256::digest(&json))
    }
}

fn resolve_column<'a, I>(decl: &ColumnDecl, cells: impl Fn() -> I) -> Result<ColumnSpec>
where
    I: Iterator<Item = &'a String>,
{
    let mut spec = ColumnSpec {
        name: decl.name.clone(),
        kind: decl.kind,
        min: 0.0,
        max: 0.0,
        categories: Vec::new(),
        is_qid: decl.qid,
        task: decl.task.unwrap_or_default(),
    };
    if decl.kind != ColumnKind::Label && decl.task.is_some() {
        return Err(Error::Schema(format!(
            "column `{}`: `task` is only valid on the label",
            decl.name
        )));
    }
    match decl.kind {
        ColumnKind::Categorical => {
            if decl.min.is_some() || decl.max.is_some() {
                return Err(Error::Schema(format!(
                    "categorical column `{}` cannot declare min/max",
                    decl.name
                )));
            }
            spec.categories = match &decl.categories {
                Some(c) => c.clone(),
                None => cells()
                    .map(|s| s.trim().to_string())
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect(),
            };
        }
        ColumnKind::Label if spec.task == LabelTask::Classification => {
            if decl.min.is_some_and(|v| v != 0.0) || decl.max.is_some_and(|v| v != 1.0) {
                return Err(Error::Schema(format!(
                    "classification label `{}` must have range [0, 1]",
                    decl.name
                )));
            }
            spec.min = 0.0;
            spec.max = 1.0;
        }
        _ => {
            if decl.categories.is_some() {
                return Err(Error::Schema(format!(
                    "numeric column `{}` cannot declare categories",
                    decl.name
                )));
            }
            let (min, max) = match (decl.min, decl.max) {
                (Some(lo), Some(hi)) => (lo, hi),
                (lo, hi) => {
                    let mut dmin = f64::INFINITY;
                    let mut dmax = f64::NEG_INFINITY;
                    for cell in cells() {
                        let v: f64 = cell.trim().parse().map_err(|_| {
                            Error::value(&decl.name, format!("`{cell}` is not a number"))
                        })?;
                        dmin = dmin.min(v);
                        dmax = dmax.max(v);
                    }
                    let lo = lo.unwrap_or(dmin);
                    let hi = hi.unwrap_or(dmax);
                    if !lo.is_finite() || !hi.is_finite() {
                        return Err(Error::Schema(format!(
                            "column `{}`: no range declared and no data to infer it",
                            decl.name
                        )));
                    }
                    (lo, hi)
                }
            };
            spec.min = min;
            spec.max = max;
        }
    }
    Ok(spec)
}

fn validate_column(c: &ColumnSpec) -> Result<()> {
    match c.kind {
        ColumnKind::Categorical => {
            if c.categories.is_empty() {
                return Err(Error::Schema(format!(
                    "categorical column `{}` has an empty category set",
                    c.name
                )));
            }
            let uniq: HashSet<&String> = c.categories.iter().collect();
            if uniq.len() != c.categories.len() {
                return Err(Error::Schema(format!(
                    "categorical column `{}` lists a category twice",
                    c.name
                )));
            }
        }
        _ => {
            if !c.min.is_finite() || !c.max.is_finite() {
                return Err(Error::Schema(format!("column `{}` has a non-finite range", c.name)));
            }
            if c.min >= c.max {
                return Err(Error::Schema(format!(
                    "degenerate column range for `{}`: min {} >= max {}",
                    c.name, c.min, c.max
                )));
            }
            if c.kind == ColumnKind::Label
                && c.task == LabelTask::Classification
                && (c.min != 0.0 || c.max != 1.0)
            {
                return Err(Error::Schema(format!(
                    "classification label `{}` must have range [0, 1]",
                    c.name
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn payroll_like_schema_has_23_attributes_two_qids() {
        // 2 QIDs, 20 plain sensitive attributes, and the label (itself
        // non-QID, so 21 sensitive attributes in total).
        let mut names = vec!["job_title".to_string(), "department".to_string()];
        let mut decls = vec![
            ColumnDecl::new("job_title", ColumnKind::Categorical)
                .qid()
                .categories(&["clerk", "engineer"]),
            ColumnDecl::new("department", ColumnKind::Categorical)
                .qid()
                .categories(&["parks", "water"]),
        ];
        for i in 0..20 {
            let n = format!("pay_{i}");
            decls.push(ColumnDecl::new(&n, ColumnKind::Continuous).range(0.0, 1e5));
            names.push(n);
        }
        names.push("high_pay".into());
        decls.push(ColumnDecl::new("high_pay", ColumnKind::Label));
        let schema = TableSchema::build(&names, &decls, &[]).unwrap();
        assert_eq!(schema.len(), 23);
        assert_eq!(schema.qid_indices(), vec![0, 1]);
        assert_eq!(schema.sensitive_indices().len(), 21);
        assert_eq!(schema.label_index(), 22);
    }

    #[test]
    fn identical_min_max_is_degenerate() {
        let decls = vec![
            ColumnDecl::new("x", ColumnKind::Continuous).range(3.0, 3.0),
            ColumnDecl::new("y", ColumnKind::Label),
        ];
        let err = TableSchema::build(&header(&["x", "y"]), &decls, &[]).unwrap_err();
        assert!(err.to_string().contains("degenerate column range"), "{err}");
    }

    #[test]
    fn inferred_constant_column_is_degenerate() {
        let decls = vec![
            ColumnDecl::new("x", ColumnKind::Continuous),
            ColumnDecl::new("y", ColumnKind::Label),
        ];
        let data = vec![header(&["5", "0"]), header(&["5", "1"])];
        let err = TableSchema::build(&header(&["x", "y"]), &decls, &data).unwrap_err();
        assert!(err.to_string().contains("degenerate"));
    }

    #[test]
    fn duplicate_header_rejected() {
        let decls = vec![
            ColumnDecl::new("age", ColumnKind::Discrete).range(0.0, 99.0),
            ColumnDecl::new("y", ColumnKind::Label),
        ];
        let err = TableSchema::build(&header(&["age", "age", "y"]), &decls, &[]).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn label_count_must_be_one() {
        let none = vec![
            ColumnDecl::new("a", ColumnKind::Continuous).range(0.0, 1.0),
            ColumnDecl::new("b", ColumnKind::Continuous).range(0.0, 1.0),
        ];
        assert!(TableSchema::build(&header(&["a", "b"]), &none, &[]).is_err());
        let two = vec![
            ColumnDecl::new("a", ColumnKind::Label),
            ColumnDecl::new("b", ColumnKind::Label),
        ];
        let err = TableSchema::build(&header(&["a", "b"]), &two, &[]).unwrap_err();
        assert!(err.to_string().contains("2 label columns"));
    }

    #[test]
    fn empty_categories_rejected() {
        let decls = vec![
            ColumnDecl::new("c", ColumnKind::Categorical).categories::<&str>(&[]),
            ColumnDecl::new("y", ColumnKind::Label),
        ];
        let err = TableSchema::build(&header(&["c", "y"]), &decls, &[]).unwrap_err();
        assert!(err.to_string().contains("empty category set"));
    }

    #[test]
    fn undeclared_column_rejected() {
        let decls = vec![ColumnDecl::new("y", ColumnKind::Label)];
        assert!(TableSchema::build(&header(&["x", "y"]), &decls, &[]).is_err());
    }

    #[test]
    fn infers_ranges_and_sorted_categories() {
        let decls = vec![
            ColumnDecl::new("x", ColumnKind::Continuous),
            ColumnDecl::new("c", ColumnKind::Categorical),
            ColumnDecl::new("y", ColumnKind::Label),
        ];
        let data = vec![
            header(&["2.5", "pear", "0"]),
            header(&["-1", "apple", "1"]),
            header(&["7", "pear", "1"]),
        ];
        let s = TableSchema::build(&header(&["x", "c", "y"]), &decls, &data).unwrap();
        assert_eq!((s.column(0).min, s.column(0).max), (-1.0, 7.0));
        assert_eq!(s.column(1).categories, vec!["apple", "pear"]);
        assert_eq!((s.label().min, s.label().max), (0.0, 1.0));
    }

    #[test]
    fn toml_declarations_parse() {
        let text = r#"
            [[column]]
            name = "zip"
            kind = "categorical"
            qid = true
            categories = ["10001", "94105"]

            [[column]]
            name = "salary"
            kind = "continuous"
            min = 0.0
            max = 250000.0

            [[column]]
            name = "income"
            kind = "label"
            task = "regression"
            min = 0.0
            max = 1.0e6
        "#;
        let decl = SchemaDecl::from_toml_str(text).unwrap();
        assert_eq!(decl.columns.len(), 3);
        assert!(decl.columns[0].qid);
        assert_eq!(decl.columns[2].task, Some(LabelTask::Regression));
        let back = SchemaDecl::from_toml_str(&decl.to_toml_string()).unwrap();
        assert_eq!(back, decl);
    }

    #[test]
    fn hash_is_stable_and_sensitive_to_ranges() {
        let cols = |max: f64| {
            vec![
                ColumnDecl::new("x", ColumnKind::Continuous).range(0.0, max),
                ColumnDecl::new("y", ColumnKind::Label),
            ]
        };
        let a = TableSchema::build(&header(&["x", "y"]), &cols(1.0), &[]).unwrap();
        let b = TableSchema::build(&header(&["x", "y"]), &cols(1.0), &[]).unwrap();
        let c = TableSchema::build(&header(&["x", "y"]), &cols(2.0), &[]).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }
}
