//! Raw tables: validated records, CSV persistence, and train/test splits.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{ColumnKind, ColumnSpec, TableSchema};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Number(f64),
    Category(String),
}

impl Value {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            Value::Number(v) => Some(*v),
            Value::Category(_) => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Number(v) => write!(f, "{v}"),
            Value::Category(s) => f.write_str(s),
        }
    }
}

/// Parses one raw cell for `col`, enforcing range, integrality and
/// category membership.
pub fn parse_cell(col: &ColumnSpec, raw: &str) -> Result<Value> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Err(Error::value(&col.name, "missing value"));
    }
    let value = match col.kind {
        ColumnKind::Categorical => Value::Category(raw.to_string()),
        _ => Value::Number(
            raw.parse::<f64>()
                .map_err(|_| Error::value(&col.name, format!("`{raw}` is not a number")))?,
        ),
    };
    validate_value(col, &value)?;
    Ok(value)
}

pub fn validate_value(col: &ColumnSpec, value: &Value) -> Result<()> {
    match (col.kind, value) {
        (ColumnKind::Categorical, Value::Category(s)) => {
            if col.category_index(s).is_none() {
                return Err(Error::value(&col.name, format!("unknown category `{s}`")));
            }
        }
        (ColumnKind::Categorical, Value::Number(v)) => {
            return Err(Error::value(&col.name, format!("expected a category, got {v}")));
        }
        (_, Value::Category(s)) => {
            return Err(Error::value(&col.name, format!("expected a number, got `{s}`")));
        }
        (_, Value::Number(v)) => {
            if !v.is_finite() {
                return Err(Error::value(&col.name, "non-finite value"));
            }
            if *v < col.min || *v > col.max {
                return Err(Error::value(
                    &col.name,
                    format!("{v} outside [{}, {}]", col.min, col.max),
                ));
            }
            if col.is_integral() && v.fract() != 0.0 {
                return Err(Error::value(&col.name, format!("{v} is not an integer")));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    schema: TableSchema,
    rows: Vec<Vec<Value>>,
}

impl RawTable {
    pub fn new(schema: TableSchema, rows: Vec<Vec<Value>>) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            check_row(&schema, row).map_err(|e| annotate_row(e, i + 1))?;
        }
        Ok(Self { schema, rows })
    }

    /// Rows already known to satisfy the schema (decoder output, subsets).
    pub(crate) fn from_trusted(schema: TableSchema, rows: Vec<Vec<Value>>) -> Self {
        Self { schema, rows }
    }

    pub fn empty(schema: TableSchema) -> Self {
        Self {
            schema,
            rows: Vec::new(),
        }
    }

    /// Parses string cells (header order) against `schema`.
    pub fn from_strings(schema: TableSchema, rows: &[Vec<String>]) -> Result<Self> {
        let rows = parse_rows(&schema, rows).map_err(|(row, e)| annotate_row(e, row))?;
        Ok(Self { schema, rows })
    }

    pub fn schema(&self) -> &TableSchema {
        &self.schema
    }

    pub fn rows(&self) -> &[Vec<Value>] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[Value] {
        &self.rows[i]
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Numeric view of one column; categoricals give their category index.
    pub fn column_values(&self, idx: usize) -> Vec<f64> {
        let col = self.schema.column(idx);
        self.rows
            .iter()
            .map(|r| match &r[idx] {
                Value::Number(v) => *v,
                Value::Category(s) => col.category_index(s).unwrap_or(0) as f64,
            })
            .collect()
    }

    pub fn label_values(&self) -> Vec<f64> {
        self.column_values(self.schema.label_index())
    }

    pub fn select(&self, indices: &[usize]) -> RawTable {
        RawTable::from_trusted(
            self.schema.clone(),
            indices.iter().map(|&i| self.rows[i].clone()).collect(),
        )
    }

    /// Concatenates tables sharing this table's schema.
    pub fn concat(schema: TableSchema, parts: Vec<RawTable>) -> Result<RawTable> {
        let mut rows = Vec::new();
        for p in parts {
            if p.schema != schema {
                return Err(Error::Schema("cannot concatenate tables with different schemas".into()));
            }
            rows.extend(p.rows);
        }
        Ok(RawTable::from_trusted(schema, rows))
    }

    /// Canonical CSV serialization of row `i`, used as its identity key.
    pub fn row_key(&self, i: usize) -> String {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(self.rows[i].iter().map(|v| v.to_string()))
            .expect("in-memory write");
        let bytes = w.into_inner().expect("in-memory flush");
        String::from_utf8(bytes).expect("utf-8 cells").trim_end().to_string()
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        w.write_record(self.schema.names())?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Reads a CSV whose header must equal the schema's column names.
    pub fn read(path: impl AsRef<Path>, schema: &TableSchema) -> Result<Self> {
        let path = path.as_ref();
        let (header, rows) = read_csv_strings(path)?;
        let expected = schema.names();
        if header.iter().map(String::as_str).ne(expected.iter().copied()) {
            return Err(Error::Schema(format!(
                "{}: header {:?} does not match schema columns {:?}",
                path.display(),
                header,
                expected
            )));
        }
        let rows = parse_rows(schema, &rows).map_err(|(row, e)| Error::Parse {
            path: path.display().to_string(),
            row,
            reason: e.to_string(),
        })?;
        Ok(Self {
            schema: schema.clone(),
            rows,
        })
    }
}

fn parse_rows(
    schema: &TableSchema,
    rows: &[Vec<String>],
) -> std::result::Result<Vec<Vec<Value>>, (usize, Error)> {
    let mut out = Vec::with_capacity(rows.len());
    for (i, raw) in rows.iter().enumerate() {
        if raw.len() != schema.len() {
            return Err((
                i + 1,
                Error::InvalidArgument(format!(
                    "expected {} values, found {}",
                    schema.len(),
                    raw.len()
                )),
            ));
        }
        let row = schema
            .columns()
            .iter()
            .zip(raw)
            .map(|(c, s)| parse_cell(c, s))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| (i + 1, e))?;
        out.push(row);
    }
    Ok(out)
}

fn check_row(schema: &TableSchema, row: &[Value]) -> Result<()> {
    if row.len() != schema.len() {
        return Err(Error::InvalidArgument(format!(
            "expected {} values, found {}",
            schema.len(),
            row.len()
        )));
    }
    for (c, v) in schema.columns().iter().zip(row) {
        validate_value(c, v)?;
    }
    Ok(())
}

fn annotate_row(e: Error, row: usize) -> Error {
    match e {
        Error::Value { column, reason } => Error::Value {
            column,
            reason: format!("row {row}: {reason}"),
        },
        Error::InvalidArgument(msg) => Error::InvalidArgument(format!("row {row}: {msg}")),
        other => other,
    }
}

/// Reads a headed CSV as strings, rejecting rows whose arity differs from
/// the header. Row numbers in errors count data rows from 1.
pub fn read_csv_strings(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(std::io::BufReader::new(file));
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            row: i + 1,
            reason: e.to_string(),
        })?;
        if rec.len() != header.len() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                row: i + 1,
                reason: format!(
                    "expected {} values, found {}",
                    header.len(),
                    rec.len()
                ),
            });
        }
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

/// Seeded disjoint split; the test part holds `round(n * test_fraction)`
/// rows. Both parts keep the original row order.
pub fn split_train_test(
    table: &RawTable,
    test_fraction: f64,
    seed: u64,
) -> Result<(RawTable, RawTable)> {
    if table.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty table".into()));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction {test_fraction} not in (0, 1)"
        )));
    }
    let n = table.len();
    let n_test = (n as f64 * test_fraction).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test_idx = idx[..n_test].to_vec();
    let mut train_idx = idx[n_test..].to_vec();
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((table.select(&train_idx), table.select(&test_idx)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::ColumnDecl;
    use std::io::Write;

    fn schema() -> TableSchema {
        let h = ["x", "n", "c", "qid", "y"];
        let d = vec![
            ColumnDecl::new("x", ColumnKind::Continuous).range(0.0, 100.0),
            ColumnDecl::new("n", ColumnKind::Discrete).range(0.0, 10.0),
            ColumnDecl::new("c", ColumnKind::Categorical).categories(&["A", "B", "C"]),
            ColumnDecl::new("qid", ColumnKind::Discrete).qid().range(18.0, 90.0),
            ColumnDecl::new("y", ColumnKind::Label),
        ];
        TableSchema::build(&h, &d, &[]).unwrap()
    }

    fn rows(n: usize) -> Vec<Vec<Value>> {
        (0..n)
            .map(|i| {
                vec![
                    Value::Number(i as f64 * 1.25),
                    Value::Number((i % 11) as f64),
                    Value::Category(["A", "B", "C"][i % 3].into()),
                    Value::Number(18.0 + i as f64),
                    Value::Number((i % 2) as f64),
                ]
            })
            .collect()
    }

    #[test]
    fn write_then_read_is_identity() {
        let t = RawTable::new(schema(), rows(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        t.write(&p).unwrap();
        let back = RawTable::read(&p, t.schema()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn short_row_reports_row_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        let mut f = std::fs::File::create(&p).unwrap();
        writeln!(f, "x,n,c,qid,y\n1,2,A,20,0\n1,2,A,20").unwrap();
        let err = RawTable::read(&p, &schema()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 2"), "{msg}");
        assert!(msg.contains("expected 5 values, found 4"), "{msg}");
    }

    #[test]
    fn non_numeric_cell_names_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "x,n,c,qid,y\nabc,2,A,20,0\n").unwrap();
        let msg = RawTable::read(&p, &schema()).unwrap_err().to_string();
        assert!(msg.contains("`x`"), "{msg}");
        assert!(msg.contains("not a number"), "{msg}");
    }

    #[test]
    fn missing_and_out_of_range_values_rejected() {
        let s = schema();
        assert!(parse_cell(s.column(0), "").is_err());
        assert!(parse_cell(s.column(0), "100.5").is_err());
        assert!(parse_cell(s.column(1), "2.5").is_err());
        assert!(parse_cell(s.column(2), "D").is_err());
        assert!(parse_cell(s.column(4), "2").is_err());
        assert_eq!(parse_cell(s.column(2), " B ").unwrap(), Value::Category("B".into()));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let t = RawTable::new(schema(), rows(60)).unwrap();
        let (a1, b1) = split_train_test(&t, 0.2, 7).unwrap();
        let (a2, b2) = split_train_test(&t, 0.2, 7).unwrap();
        assert_eq!((a1.len(), b1.len()), (48, 12));
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        let keys: std::collections::HashSet<String> =
            (0..a1.len()).map(|i| a1.row_key(i)).collect();
        assert!((0..b1.len()).all(|i| !keys.contains(&b1.row_key(i))));
    }

    #[test]
    fn split_of_fifteen_thousand() {
        let s = schema();
        let rows: Vec<Vec<Value>> = (0..15000)
            .map(|i| {
                vec![
                    Value::Number(0.0),
                    Value::Number(0.0),
                    Value::Category("A".into()),
                    Value::Number(20.0),
                    Value::Number((i % 2) as f64),
                ]
            })
            .collect();
        let t = RawTable::new(s, rows).unwrap();
        let (train, test) = split_train_test(&t, 0.2, 1).unwrap();
        assert_eq!((train.len(), test.len()), (12000, 3000));
    }

    #[test]
    fn split_two_rows_in_half() {
        let t = RawTable::new(schema(), rows(2)).unwrap();
        let (a, b) = split_train_test(&t, 0.5, 0).unwrap();
        assert_eq!((a.len(), b.len()), (1, 1));
    }

    #[test]
    fn split_rejects_empty_and_bad_fraction() {
        let t = RawTable::empty(schema());
        assert!(split_train_test(&t, 0.2, 0).is_err());
        let t = RawTable::new(schema(), rows(5)).unwrap();
        assert!(split_train_test(&t, 1.0, 0).is_err());
        assert!(split_train_test(&t, 0.0, 0).is_err());
    }
}
