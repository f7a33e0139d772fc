use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `X_i _||_ X_j | X_S` over covariate indices.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CiConstraint {
    pub i: usize,
    pub j: usize,
    /// Sorted, duplicate-free.
    pub s: Vec<usize>,
}

impl CiConstraint {
    /// Validates against `p` covariates.
    pub fn new(i: usize, j: usize, mut s: Vec<usize>, p: usize) -> Result<Self> {
        s.sort_unstable();
        s.dedup();
        if i == j {
            return Err(Error::InvalidArgument(format!(
                "constraint relates covariate {i} to itself"
            )));
        }
        if s.contains(&i) || s.contains(&j) {
            return Err(Error::InvalidArgument(
                "conditioning set contains a constrained covariate".into(),
            ));
        }
        if i >= p || j >= p || s.iter().any(|&k| k >= p) {
            return Err(Error::InvalidArgument(format!(
                "constraint index out of range for {p} covariates"
            )));
        }
        Ok(Self { i, j, s })
    }

    pub fn marginal(i: usize, j: usize, p: usize) -> Result<Self> {
        Self::new(i, j, Vec::new(), p)
    }

    /// `[i, j, s...]`
    pub fn columns(&self) -> Vec<usize> {
        let mut c = vec![self.i, self.j];
        c.extend_from_slice(&self.s);
        c
    }

    pub fn display(&self, names: &[String]) -> String {
        let mut out = format!("{} _||_ {}", names[self.i], names[self.j]);
        if !self.s.is_empty() {
            let s: Vec<&str> = self.s.iter().map(|&k| names[k].as_str()).collect();
            out.push_str(" | ");
            out.push_str(&s.join(", "));
        }
        out
    }
}

/// Parses one constraint per line: `a _||_ b [| c[, d...]]`.
///
/// Blank lines and `#` comments are skipped. Names resolve against
/// `registry` (typically the dataset's covariate names).
pub fn parse_constraints(text: &str, registry: &[String]) -> Result<Vec<CiConstraint>> {
    let lookup = |name: &str, line: usize| -> Result<usize> {
        registry
            .iter()
            .position(|r| r == name)
            .ok_or_else(|| Error::Syntax {
                line,
                message: format!("unknown covariate `{name}`"),
            })
    };
    let mut out = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((lhs, rest)) = body.split_once("_||_") else {
            return Err(Error::Syntax {
                line,
                message: "expected `<name> _||_ <name>`".into(),
            });
        };
        let (rhs, given) = match rest.split_once('|') {
            Some((rhs, given)) => (rhs, Some(given)),
            None => (rest, None),
        };
        let (a, b) = (lhs.trim(), rhs.trim());
        if a.is_empty()
            || b.is_empty()
            || a.contains(char::is_whitespace)
            || b.contains(char::is_whitespace)
        {
            return Err(Error::Syntax {
                line,
                message: format!("malformed constraint `{body}`"),
            });
        }
        let i = lookup(a, line)?;
        let j = lookup(b, line)?;
        let mut s = Vec::new();
        if let Some(given) = given {
            for name in given.split(',') {
                let name = name.trim();
                if name.is_empty() {
                    return Err(Error::Syntax {
                        line,
                        message: "empty name in conditioning set".into(),
                    });
                }
                s.push(lookup(name, line)?);
            }
        }
        let c = CiConstraint::new(i, j, s, registry.len()).map_err(|e| Error::Syntax {
            line,
            message: e.to_string(),
        })?;
        out.push(c);
    }
    Ok(out)
}

/// Inverse of [`parse_constraints`].
pub fn format_constraints(constraints: &[CiConstraint], names: &[String]) -> String {
    let mut out = String::new();
    for c in constraints {
        out.push_str(&c.display(names));
        out.push('\n');
    }
    out
}
