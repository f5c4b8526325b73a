//! Column-named sample tables and their CSV form.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::VariableId;
use crate::scm::Assignment;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("duplicate column `{0}`")]
    DuplicateColumn(String),
    #[error("row {row} has {got} fields, expected {expected}")]
    Ragged { row: usize, got: usize, expected: usize },
    #[error("row {row}, column `{column}`: cannot parse `{text}` as a number")]
    BadNumber { row: usize, column: String, text: String },
    #[error("invalid column name: {0}")]
    BadColumn(String),
    #[error("unknown column `{0}`")]
    UnknownColumn(VariableId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub seed: u64,
}

/// Rectangular table of endogenous samples, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    columns: Vec<VariableId>,
    values: Vec<f64>,
    provenance: Option<Provenance>,
}

impl Dataset {
    pub fn new(columns: Vec<VariableId>) -> Result<Self, DatasetError> {
        for (i, c) in columns.iter().enumerate() {
            if columns[..i].contains(c) {
                return Err(DatasetError::DuplicateColumn(c.to_string()));
            }
        }
        Ok(Self { columns, values: Vec::new(), provenance: None })
    }

    pub fn with_provenance(mut self, generator: impl Into<String>, seed: u64) -> Self {
        self.provenance = Some(Provenance { generator: generator.into(), seed });
        self
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        self.provenance.as_ref()
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<(), DatasetError> {
        if row.len() != self.columns.len() {
            return Err(DatasetError::Ragged {
                row: self.n_rows(),
                got: row.len(),
                expected: self.columns.len(),
            });
        }
        self.values.extend_from_slice(row);
        Ok(())
    }

    pub fn columns(&self) -> &[VariableId] {
        &self.columns
    }

    pub fn n_rows(&self) -> usize {
        if self.columns.is_empty() {
            0
        } else {
            self.values.len() / self.columns.len()
        }
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.columns.len();
        &self.values[i * w..(i + 1) * w]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.columns.len().max(1))
    }

    pub fn column_index(&self, id: &VariableId) -> Result<usize, DatasetError> {
        self.columns
            .iter()
            .position(|c| c == id)
            .ok_or_else(|| DatasetError::UnknownColumn(id.clone()))
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        self.rows().map(move |r| r[j])
    }

    pub fn row_assignment(&self, i: usize) -> Assignment {
        self.columns.iter().cloned().zip(self.row(i).iter().copied()).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), DatasetError> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(self.columns.iter().map(VariableId::as_str))?;
        for row in self.rows() {
            // 17 significant digits round-trip every f64
            wtr.write_record(row.iter().map(|v| format!("{v:.16e}")))?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, DatasetError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let columns = rdr
            .headers()?
            .iter()
            .map(|h| VariableId::new(h).map_err(|e| DatasetError::BadColumn(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        let mut ds = Dataset::new(columns)?;
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != ds.n_cols() {
                return Err(DatasetError::Ragged { row: i, got: rec.len(), expected: ds.n_cols() });
            }
            let mut row = Vec::with_capacity(rec.len());
            for (j, field) in rec.iter().enumerate() {
                row.push(field.parse::<f64>().map_err(|_| DatasetError::BadNumber {
                    row: i,
                    column: ds.columns[j].to_string(),
                    text: field.to_string(),
                })?);
            }
            ds.values.extend(row);
        }
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        let mut d = Dataset::new(vec!["a".into(), "b".into()]).unwrap();
        d.push_row(&[0.1, -2.5e-300]).unwrap();
        d.push_row(&[std::f64::consts::PI, 1.0 / 3.0]).unwrap();
        d
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let d = small();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("a,b\n"));
        assert!(text.contains("3.1415926535897931e0"));
        let back = Dataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            Dataset::new(vec!["a".into(), "a".into()]),
            Err(DatasetError::DuplicateColumn(_))
        ));
        assert!(matches!(
            Dataset::read_csv("a,b\n1,x\n".as_bytes()),
            Err(DatasetError::BadNumber { row: 0, .. })
        ));
        assert!(Dataset::read_csv("a,b\n1\n".as_bytes()).is_err());
        let mut d = small();
        assert!(d.push_row(&[1.0]).is_err());
    }

    #[test]
    fn accessors() {
        let d = small();
        assert_eq!(d.n_rows(), 2);
        assert_eq!(d.column(0).collect::<Vec<_>>(), vec![0.1, std::f64::consts::PI]);
        assert_eq!(d.row_assignment(1)[&"b".into()], 1.0 / 3.0);
        assert_eq!(d.column_index(&"b".into()).unwrap(), 1);
        assert!(d.column_index(&"z".into()).is_err());
    }
}
