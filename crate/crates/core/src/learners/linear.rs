use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::Predictor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub intercept: f64,
    pub coef: Vec<f64>,
    pub ridge: f64,
    /// Design was rank deficient with `ridge == 0`; the minimum-norm
    /// solution was returned.
    pub rank_deficient: bool,
}

impl LinearModel {
    pub fn dim(&self) -> usize {
        self.coef.len()
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.intercept + row.iter().zip(&self.coef).map(|(x, b)| x * b).sum::<f64>()
    }
}

impl Predictor for LinearModel {
    fn dim(&self) -> usize {
        self.coef.len()
    }

    fn predict_unchecked(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let mut out = vec![self.intercept; x.nrows()];
        for (j, &b) in self.coef.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(x.column(j).iter()) {
                *o += b * v;
            }
        }
        out
    }
}

/// Least squares with an unpenalized intercept:
/// minimizes `|y - b0 - X b|^2 + ridge |b|^2`.
pub fn fit_linear(x: &DMatrix<f64>, y: &[f64], ridge: f64) -> Result<LinearModel> {
    let (n, d) = x.shape();
    if n == 0 || y.len() != n {
        return Err(Error::Learner(format!(
            "linear fit needs matching non-empty data ({n} rows, {} targets)",
            y.len()
        )));
    }
    if !(ridge >= 0.0) {
        return Err(Error::Learner(format!("ridge must be >= 0, got {ridge}")));
    }
    let y_mean = y.iter().sum::<f64>() / n as f64;
    if d == 0 {
        return Ok(LinearModel {
            intercept: y_mean,
            coef: Vec::new(),
            ridge,
            rank_deficient: false,
        });
    }
    let means: Vec<f64> = (0..d).map(|j| x.column(j).mean()).collect();
    let xc = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - means[j]);
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));

    let mut rank_deficient = false;
    let beta = if ridge > 0.0 {
        let mut gram = xc.tr_mul(&xc);
        for k in 0..d {
            gram[(k, k)] += ridge;
        }
        let rhs = xc.tr_mul(&yc);
        match gram.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => min_norm_solve(&xc, &yc, &mut rank_deficient)?,
        }
    } else {
        min_norm_solve(&xc, &yc, &mut rank_deficient)?
    };
    let coef: Vec<f64> = beta.iter().copied().collect();
    if coef.iter().any(|b| !b.is_finite()) {
        return Err(Error::Learner("non-finite linear coefficients".into()));
    }
    let intercept = y_mean - coef.iter().zip(&means).map(|(b, m)| b * m).sum::<f64>();
    Ok(LinearModel {
        intercept,
        coef,
        ridge,
        rank_deficient,
    })
}

fn min_norm_solve(
    xc: &DMatrix<f64>,
    yc: &DVector<f64>,
    rank_deficient: &mut bool,
) -> Result<DVector<f64>> {
    let svd = xc.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-10 * (xc.nrows().max(xc.ncols()) as f64);
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    *rank_deficient = rank < xc.ncols();
    svd.solve(yc, tol)
        .map_err(|e| Error::Learner(format!("least-squares solve failed: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn exact_line_recovered() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64 * 0.3 - 2.0).collect();
        let y: Vec<f64> = xs.iter().map(|x| 3.0 + 2.0 * x).collect();
        let m = fit_linear(&col(&xs), &y, 0.0).unwrap();
        assert!((m.intercept - 3.0).abs() < 1e-10);
        assert!((m.coef[0] - 2.0).abs() < 1e-10);
        assert!(!m.rank_deficient);
    }

    #[test]
    fn intercept_only_predicts_mean() {
        let x = DMatrix::<f64>::zeros(4, 0);
        let m = fit_linear(&x, &[1.0, 2.0, 3.0, 6.0], 0.0).unwrap();
        assert_eq!(m.predict(&DMatrix::zeros(2, 0)).unwrap(), vec![3.0, 3.0]);
    }

    #[test]
    fn duplicated_column_matches_single_column_fit() {
        let xs: Vec<f64> = (0..30).map(|i| ((i * 7) % 11) as f64).collect();
        let y: Vec<f64> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| 1.0 + 0.5 * x + ((i % 3) as f64 - 1.0) * 0.1)
            .collect();
        let single = fit_linear(&col(&xs), &y, 0.0).unwrap();
        let dup = DMatrix::from_fn(30, 2, |i, _| xs[i]);
        let double = fit_linear(&dup, &y, 1e-8).unwrap();
        assert!(double.coef.iter().all(|c| c.is_finite()));
        let a = single.predict(&col(&xs)).unwrap();
        let b = double.predict(&dup).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn rank_deficiency_flagged_without_ridge() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let dup = DMatrix::from_fn(10, 2, |i, _| xs[i]);
        let y: Vec<f64> = xs.iter().map(|x| 2.0 * x).collect();
        let m = fit_linear(&dup, &y, 0.0).unwrap();
        assert!(m.rank_deficient);
        // minimum norm splits the slope evenly
        assert!((m.coef[0] - 1.0).abs() < 1e-8 && (m.coef[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn residuals_orthogonal_to_design() {
        let n = 200;
        let x = DMatrix::from_fn(n, 3, |i, j| ((i * (j + 3)) % 17) as f64 / 7.0 - (j as f64));
        let y: Vec<f64> = (0..n).map(|i| ((i * 13) % 29) as f64 / 3.0).collect();
        let m = fit_linear(&x, &y, 0.0).unwrap();
        let fitted = m.predict(&x).unwrap();
        let r: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
        assert!(r.iter().sum::<f64>().abs() < 1e-8 * n as f64);
        for j in 0..3 {
            let dot: f64 = x.column(j).iter().zip(&r).map(|(a, b)| a * b).sum();
            assert!(dot.abs() < 1e-8 * n as f64, "column {j}: {dot}");
        }
    }
}
