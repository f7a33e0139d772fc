use serde::Serialize;

use super::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub severity: Severity,
    pub column: String,
    /// First offending row (0-based), when row-specific.
    pub row: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    /// No error-level entries; warnings allowed.
    pub fn is_valid(&self) -> bool {
        self.violations
            .iter()
            .all(|v| v.severity != Severity::Error)
    }
}

pub fn validate_dataset(ds: &Dataset, require_binary_outcome: bool) -> ValidationReport {
    let mut violations = Vec::new();
    for (name, col) in ds.covariate_names().iter().zip(ds.columns()) {
        if let Some(row) = col.iter().position(|v| !v.is_finite()) {
            violations.push(Violation {
                severity: Severity::Error,
                column: name.clone(),
                row: Some(row),
                message: "non-finite value".into(),
            });
        }
        if col.iter().all(|&v| v == col[0]) {
            violations.push(Violation {
                severity: Severity::Warning,
                column: name.clone(),
                row: None,
                message: "constant column".into(),
            });
        }
    }
    if let Some(row) = ds.outcome().iter().position(|v| !v.is_finite()) {
        violations.push(Violation {
            severity: Severity::Error,
            column: "<outcome>".into(),
            row: Some(row),
            message: "non-finite outcome".into(),
        });
    }
    if require_binary_outcome {
        if let Some(row) = ds.outcome().iter().position(|&y| y != 0.0 && y != 1.0) {
            violations.push(Violation {
                severity: Severity::Error,
                column: "<outcome>".into(),
                row: Some(row),
                message: format!("outcome {} is not binary", ds.outcome()[row]),
            });
        }
    }
    ValidationReport { violations }
}
