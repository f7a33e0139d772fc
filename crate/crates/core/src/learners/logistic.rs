use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{log_sigmoid, sigmoid, Predictor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub intercept: f64,
    pub coef: Vec<f64>,
    pub ridge: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Penalized log-likelihood at the start and after every accepted step.
    pub objective_history: Vec<f64>,
}

impl LogisticModel {
    pub fn dim(&self) -> usize {
        self.coef.len()
    }

    pub fn linear_predictor(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let mut eta = vec![self.intercept; x.nrows()];
        for (j, &b) in self.coef.iter().enumerate() {
            for (e, v) in eta.iter_mut().zip(x.column(j).iter()) {
                *e += b * v;
            }
        }
        eta
    }
}

impl Predictor for LogisticModel {
    fn dim(&self) -> usize {
        self.coef.len()
    }

    fn predict_unchecked(&self, x: &DMatrix<f64>) -> Vec<f64> {
        self.linear_predictor(x).into_iter().map(sigmoid).collect()
    }
}

fn penalized_loglik(eta: &[f64], y: &[f64], theta: &DVector<f64>, ridge: f64) -> f64 {
    let ll: f64 = eta
        .iter()
        .zip(y)
        .map(|(&e, &yi)| yi * log_sigmoid(e) + (1.0 - yi) * log_sigmoid(-e))
        .sum();
    ll - 0.5 * ridge * theta.norm_squared()
}

/// Ridge-penalized logistic regression by iteratively reweighted least
/// squares with step halving.
///
/// The penalty `ridge/2 |theta|^2` covers the intercept as well, which keeps
/// single-class and separable data finite. The penalized log-likelihood never
/// decreases between accepted iterations.
pub fn fit_logistic(
    x: &DMatrix<f64>,
    labels: &[f64],
    ridge: f64,
    max_iter: usize,
    tol: f64,
) -> Result<LogisticModel> {
    let (n, d) = x.shape();
    if n == 0 || labels.len() != n {
        return Err(Error::Learner(format!(
            "logistic fit needs matching non-empty data ({n} rows, {} labels)",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Learner(format!("label {bad} is not binary")));
    }
    if !(ridge > 0.0) {
        return Err(Error::Learner(format!(
            "logistic ridge must be > 0, got {ridge}"
        )));
    }
    let m = d + 1;
    let design = DMatrix::from_fn(n, m, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });

    let mut theta = DVector::<f64>::zeros(m);
    let mut eta = vec![0.0; n];
    let mut obj = penalized_loglik(&eta, labels, &theta, ridge);
    let mut history = vec![obj];
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..max_iter {
        iterations += 1;
        let p: Vec<f64> = eta.iter().map(|&e| sigmoid(e)).collect();
        let w: Vec<f64> = p.iter().map(|&pi| (pi * (1.0 - pi)).max(1e-12)).collect();
        let resid = DVector::from_iterator(n, labels.iter().zip(&p).map(|(yi, pi)| yi - pi));
        let grad = design.tr_mul(&resid) - &theta * ridge;
        let weighted = DMatrix::from_fn(n, m, |i, j| design[(i, j)] * w[i]);
        let mut hess = design.tr_mul(&weighted);
        for k in 0..m {
            hess[(k, k)] += ridge;
        }
        let step = match hess.cholesky() {
            Some(ch) => ch.solve(&grad),
            None => return Err(Error::Learner("IRLS Hessian not positive definite".into())),
        };

        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &theta + &step * scale;
            let cand_eta: Vec<f64> = (&design * &cand).iter().copied().collect();
            let cand_obj = penalized_loglik(&cand_eta, labels, &cand, ridge);
            if cand_obj.is_finite() && cand_obj >= obj {
                theta = cand;
                eta = cand_eta;
                obj = cand_obj;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            // no ascent direction left at machine precision
            converged = true;
            break;
        }
        history.push(obj);
        let change = (&step * scale).amax();
        if change < tol {
            converged = true;
            break;
        }
    }
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::Learner("non-finite logistic coefficients".into()));
    }
    if !converged {
        log::warn!("logistic IRLS did not converge in {max_iter} iterations");
    }
    Ok(LogisticModel {
        intercept: theta[0],
        coef: theta.iter().skip(1).copied().collect(),
        ridge,
        converged,
        iterations,
        objective_history: history,
    })
}
