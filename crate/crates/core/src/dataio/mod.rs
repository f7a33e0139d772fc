//! Dataset model, CSV ingestion, fold assignment and seeded randomness.

mod folds;
mod seed;
mod validate;

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use folds::{assign_folds, FoldAssignment};
pub use seed::SeedTree;
pub use validate::{validate_dataset, Severity, ValidationReport, Violation};

/// Units of (covariates, binary treatment, outcome).
///
/// Covariates are stored column by column; projection code scans single
/// columns far more often than single rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
    treatment: Vec<u8>,
    outcome: Vec<f64>,
}

impl Dataset {
    pub fn new(
        names: Vec<String>,
        columns: Vec<Vec<f64>>,
        treatment: Vec<u8>,
        outcome: Vec<f64>,
    ) -> Result<Self> {
        let n = treatment.len();
        if n == 0 {
            return Err(Error::InvalidArgument("dataset has no units".into()));
        }
        if columns.is_empty() {
            return Err(Error::InvalidArgument("dataset has no covariates".into()));
        }
        if names.len() != columns.len() {
            return Err(Error::InvalidArgument(format!(
                "{} covariate names for {} columns",
                names.len(),
                columns.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Schema(format!("duplicate covariate name `{name}`")));
            }
        }
        if outcome.len() != n {
            return Err(Error::InvalidArgument(format!(
                "outcome has {} entries, treatment has {n}",
                outcome.len()
            )));
        }
        for (name, col) in names.iter().zip(&columns) {
            if col.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "column `{name}` has {} entries, expected {n}",
                    col.len()
                )));
            }
            if let Some(row) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::Domain {
                    row,
                    message: format!("non-finite value in `{name}`"),
                });
            }
        }
        if let Some(row) = treatment.iter().position(|&t| t > 1) {
            return Err(Error::Domain {
                row,
                message: "treatment must be 0 or 1".into(),
            });
        }
        if let Some(row) = outcome.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain {
                row,
                message: "non-finite outcome".into(),
            });
        }
        Ok(Self {
            names,
            columns,
            treatment,
            outcome,
        })
    }

    pub fn n(&self) -> usize {
        self.treatment.len()
    }

    pub fn p(&self) -> usize {
        self.columns.len()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.names
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.columns[j]
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn value(&self, unit: usize, j: usize) -> f64 {
        self.columns[j][unit]
    }

    pub fn row(&self, unit: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[unit]).collect()
    }

    pub fn treatment(&self) -> &[u8] {
        &self.treatment
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    pub fn n_treated(&self) -> usize {
        self.treatment.iter().filter(|&&t| t == 1).count()
    }

    /// n×p covariate matrix.
    pub fn covariate_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n(), self.p(), |i, j| self.columns[j][i])
    }

    /// Rows `indices` in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            names: self.names.clone(),
            columns: self
                .columns
                .iter()
                .map(|c| indices.iter().map(|&i| c[i]).collect())
                .collect(),
            treatment: indices.iter().map(|&i| self.treatment[i]).collect(),
            outcome: indices.iter().map(|&i| self.outcome[i]).collect(),
        }
    }

    /// Emits header `names..., treatment, outcome`.
    pub fn write_csv<W: Write>(&self, writer: W, treatment: &str, outcome: &str) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.names.iter().map(String::as_str).collect();
        header.push(treatment);
        header.push(outcome);
        w.write_record(&header).map_err(csv_io)?;
        for i in 0..self.n() {
            let mut rec: Vec<String> = self.columns.iter().map(|c| fmt_f64(c[i])).collect();
            rec.push(self.treatment[i].to_string());
            rec.push(fmt_f64(self.outcome[i]));
            w.write_record(&rec).map_err(csv_io)?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

fn fmt_f64(v: f64) -> String {
    // shortest representation that round-trips
    format!("{v:?}")
}

fn csv_io(e: csv::Error) -> Error {
    Error::io("<csv>", std::io::Error::other(e.to_string()))
}

/// Column roles for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub treatment: String,
    pub outcome: String,
    /// All remaining columns when absent.
    #[serde(default)]
    pub covariates: Option<Vec<String>>,
}

impl Schema {
    pub fn new(treatment: impl Into<String>, outcome: impl Into<String>) -> Self {
        Self {
            treatment: treatment.into(),
            outcome: outcome.into(),
            covariates: None,
        }
    }

    pub fn with_covariates<I, S>(mut self, covariates: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.covariates = Some(covariates.into_iter().map(Into::into).collect());
        self
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("schema: {e}")))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

/// Parses CSV text; rows are numbered from 1 (the first data line).
pub fn read_csv<R: Read>(reader: R, schema: &Schema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Schema(format!("unreadable header: {e}")))?
        .iter()
        .map(str::to_owned)
        .collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column `{name}` not in header")))
    };
    let t_col = find(&schema.treatment)?;
    let y_col = find(&schema.outcome)?;
    let cov_names: Vec<String> = match &schema.covariates {
        Some(c) => c.clone(),
        None => header
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != t_col && *i != y_col)
            .map(|(_, h)| h.clone())
            .collect(),
    };
    if cov_names.is_empty() {
        return Err(Error::Schema("no covariate columns".into()));
    }
    let cov_cols = cov_names
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;

    let mut columns = vec![Vec::new(); cov_cols.len()];
    let mut treatment = Vec::new();
    let mut outcome = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            column: String::new(),
            message: e.to_string(),
        })?;
        let cell = |c: usize| -> Result<f64> {
            let raw = rec.get(c).unwrap_or("");
            if raw.is_empty() {
                return Err(Error::Parse {
                    row,
                    column: header[c].clone(),
                    message: "missing value".into(),
                });
            }
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                row,
                column: header[c].clone(),
                message: format!("`{raw}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: header[c].clone(),
                    message: "non-finite value".into(),
                });
            }
            Ok(v)
        };
        for (dst, &c) in columns.iter_mut().zip(&cov_cols) {
            dst.push(cell(c)?);
        }
        let t = cell(t_col)?;
        let t = if t == 0.0 {
            0
        } else if t == 1.0 {
            1
        } else {
            return Err(Error::Domain {
                row,
                message: format!("treatment `{}` = {t} is not 0 or 1", schema.treatment),
            });
        };
        treatment.push(t);
        outcome.push(cell(y_col)?);
    }
    Dataset::new(cov_names, columns, treatment, outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = "x1,x2,t,y\n0.5,1,1,1\n-1.25,0,0,0\n2,1,0,1\n3.5e-1,0,1,0\n";

    fn schema() -> Schema {
        Schema::new("t", "y")
    }

    #[test]
    fn parses_four_rows() {
        let ds = read_csv(TOY.as_bytes(), &schema()).unwrap();
        assert_eq!(ds.n(), 4);
        assert_eq!(ds.p(), 2);
        assert_eq!(ds.covariate_names(), ["x1", "x2"]);
        assert_eq!(ds.treatment(), [1, 0, 0, 1]);
        assert_eq!(ds.column(0)[3], 0.35);
    }

    #[test]
    fn loading_twice_is_identical() {
        let a = read_csv(TOY.as_bytes(), &schema()).unwrap();
        let b = read_csv(TOY.as_bytes(), &schema()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn treatment_outside_binary_names_row() {
        let text = "x1,t,y\n1,0,1\n2,2,0\n";
        match read_csv(text.as_bytes(), &schema()) {
            Err(Error::Domain { row, .. }) => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_schema_error() {
        let s = Schema::new("treat", "y");
        assert!(matches!(
            read_csv(TOY.as_bytes(), &s),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn bad_cell_reports_row_and_column() {
        let text = "x1,t,y\n1,0,1\nabc,1,0\n";
        match read_csv(text.as_bytes(), &schema()) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "x1");
            }
            other => panic!("unexpected {other:?}"),
        }
        let text = "x1,t,y\n1,0,\n";
        assert!(matches!(
            read_csv(text.as_bytes(), &schema()),
            Err(Error::Parse { row: 1, .. })
        ));
    }

    #[test]
    fn explicit_covariate_subset() {
        let s = schema().with_covariates(["x2"]);
        let ds = read_csv(TOY.as_bytes(), &s).unwrap();
        assert_eq!(ds.p(), 1);
        assert_eq!(ds.column(0), [1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn schema_from_toml() {
        let s =
            Schema::from_toml_str("treatment = \"t\"\noutcome = \"y\"\ncovariates = [\"x1\"]\n")
                .unwrap();
        assert_eq!(s.covariates.as_deref(), Some(&["x1".to_string()][..]));
    }

    #[test]
    fn duplicate_names_rejected() {
        let r = Dataset::new(
            vec!["a".into(), "a".into()],
            vec![vec![1.0], vec![2.0]],
            vec![0],
            vec![1.0],
        );
        assert!(r.is_err());
    }
}
