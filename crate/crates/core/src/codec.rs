//! Record <-> square-matrix conversion.
//!
//! Attributes are laid out row-major in canonical column order on a d x d
//! grid, d being the smallest power of two that is at least 4 with d*d >= m.
//! Every attribute is min-max scaled onto [-1, 1]; padding cells hold 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{ColumnKind, ColumnSpec, TableSchema};
use crate::table::{validate_value, RawTable, Value};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixLayout {
    side: usize,
    attributes: usize,
}

impl MatrixLayout {
    pub fn for_attributes(m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidArgument(format!(
                "a table needs at least 2 attributes, got {m}"
            )));
        }
        let mut side = 4;
        while side * side < m {
            side *= 2;
        }
        Ok(Self {
            side,
            attributes: m,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn cells(&self) -> usize {
        self.side * self.side
    }

    pub fn attributes(&self) -> usize {
        self.attributes
    }

    pub fn pad_count(&self) -> usize {
        self.cells() - self.attributes
    }

    /// (row, col) of attribute `idx`.
    pub fn cell_of_attribute(&self, idx: usize) -> (usize, usize) {
        assert!(idx < self.attributes, "attribute {idx} out of range");
        (idx / self.side, idx % self.side)
    }

    /// Flat row-major offset of attribute `idx`; identical to `idx`.
    pub fn offset_of_attribute(&self, idx: usize) -> usize {
        let (r, c) = self.cell_of_attribute(idx);
        r * self.side + c
    }
}

/// `n` matrices of `side x side` cells, stored contiguously row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixBatch {
    layout: MatrixLayout,
    data: Vec<f64>,
}

impl MatrixBatch {
    pub fn new(layout: MatrixLayout, data: Vec<f64>) -> Result<Self> {
        if data.len() % layout.cells() != 0 {
            return Err(Error::Shape(format!(
                "{} values do not form whole {}x{} matrices",
                data.len(),
                layout.side(),
                layout.side()
            )));
        }
        Ok(Self { layout, data })
    }

    pub fn layout(&self) -> &MatrixLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.layout.cells()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn matrix(&self, i: usize) -> &[f64] {
        let c = self.layout.cells();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// Maps a validated value onto [-1, 1].
pub fn normalize_value(col: &ColumnSpec, value: &Value) -> Result<f64> {
    validate_value(col, value)?;
    Ok(match value {
        Value::Number(v) => 2.0 * (v - col.min) / (col.max - col.min) - 1.0,
        Value::Category(s) => {
            let c = col.categories.len();
            if c == 1 {
                0.0
            } else {
                let i = col.category_index(s).expect("validated");
                2.0 * i as f64 / (c - 1) as f64 - 1.0
            }
        }
    })
}

/// Inverse of [`normalize_value`]; total on all reals.
pub fn denormalize_value(col: &ColumnSpec, cell: f64) -> Value {
    let v = if cell.is_nan() { 0.0 } else { cell.clamp(-1.0, 1.0) };
    match col.kind {
        ColumnKind::Categorical => {
            let c = col.categories.len();
            let idx = ((v + 1.0) * (c - 1) as f64 / 2.0).round();
            let idx = (idx.max(0.0) as usize).min(c - 1);
            Value::Category(col.categories[idx].clone())
        }
        _ => {
            let x = col.min + (v + 1.0) * (col.max - col.min) / 2.0;
            let x = if col.is_integral() {
                x.round().clamp(col.min.ceil(), col.max.floor())
            } else {
                x.clamp(col.min, col.max)
            };
            Value::Number(x)
        }
    }
}

pub fn encode_record(record: &[Value], schema: &TableSchema, layout: &MatrixLayout) -> Result<Vec<f64>> {
    check_layout(schema, layout)?;
    if record.len() != schema.len() {
        return Err(Error::Shape(format!(
            "record has {} values, schema has {} columns",
            record.len(),
            schema.len()
        )));
    }
    let mut cells = vec![0.0; layout.cells()];
    for (i, (col, v)) in schema.columns().iter().zip(record).enumerate() {
        cells[layout.offset_of_attribute(i)] = normalize_value(col, v)?;
    }
    Ok(cells)
}

pub fn decode_matrix(matrix: &[f64], schema: &TableSchema, layout: &MatrixLayout) -> Result<Vec<Value>> {
    check_layout(schema, layout)?;
    if matrix.len() != layout.cells() {
        return Err(Error::Shape(format!(
            "matrix has {} cells, layout expects {}",
            matrix.len(),
            layout.cells()
        )));
    }
    Ok(schema
        .columns()
        .iter()
        .enumerate()
        .map(|(i, col)| denormalize_value(col, matrix[layout.offset_of_attribute(i)]))
        .collect())
}

pub fn encode_table(table: &RawTable, layout: &MatrixLayout) -> Result<MatrixBatch> {
    let mut data = Vec::with_capacity(table.len() * layout.cells());
    for row in table.rows() {
        data.extend(encode_record(row, table.schema(), layout)?);
    }
    MatrixBatch::new(layout.clone(), data)
}

pub fn decode_batch(batch: &MatrixBatch, schema: &TableSchema) -> Result<RawTable> {
    let rows = (0..batch.len())
        .map(|i| decode_matrix(batch.matrix(i), schema, batch.layout()))
        .collect::<Result<Vec<_>>>()?;
    Ok(RawTable::from_trusted(schema.clone(), rows))
}

fn check_layout(schema: &TableSchema, layout: &MatrixLayout) -> Result<()> {
    if layout.attributes() != schema.len() {
        return Err(Error::Shape(format!(
            "layout holds {} attributes, schema has {}",
            layout.attributes(),
            schema.len()
        )));
    }
    Ok(())
}
