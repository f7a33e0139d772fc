//! Regression primitives and a cross-validated ensemble used for nuisance
//! functions.
//!
//! Every learner takes an n×d feature matrix and is a deterministic function
//! of its inputs (plus the seed, for the ensemble's CV split).

mod boost;
mod ensemble;
mod linear;
mod logistic;
mod smoother;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use boost::{fit_stump_boost, BoostModel, Stump};
pub use ensemble::{
    fit_ensemble, simplex_least_squares, CandidateSpec, EnsembleModel, LearnerConfig, Member,
};
pub use linear::{fit_linear, LinearModel};
pub use logistic::{fit_logistic, LogisticModel};
pub use smoother::{fit_smoother, KnnModel};

/// Probability predictions are clipped to `[PROB_CLIP, 1 - PROB_CLIP]`.
pub const PROB_CLIP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Probability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RegressionModel {
    Constant { dim: usize, value: f64 },
    Linear(LinearModel),
    Logistic(LogisticModel),
    KnnSmoother(KnnModel),
    StumpBoost(BoostModel),
}

pub trait Predictor {
    fn dim(&self) -> usize;

    /// Predictions for each row of `x`.
    fn predict_unchecked(&self, x: &DMatrix<f64>) -> Vec<f64>;

    fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        check_dim(self.dim(), x)?;
        Ok(self.predict_unchecked(x))
    }
}

pub(crate) fn check_dim(expected: usize, x: &DMatrix<f64>) -> Result<()> {
    if x.ncols() != expected {
        return Err(Error::Dimension {
            expected,
            got: x.ncols(),
        });
    }
    Ok(())
}

impl Predictor for RegressionModel {
    fn dim(&self) -> usize {
        match self {
            RegressionModel::Constant { dim, .. } => *dim,
            RegressionModel::Linear(m) => m.dim(),
            RegressionModel::Logistic(m) => m.dim(),
            RegressionModel::KnnSmoother(m) => m.dim(),
            RegressionModel::StumpBoost(m) => m.dim(),
        }
    }

    fn predict_unchecked(&self, x: &DMatrix<f64>) -> Vec<f64> {
        match self {
            RegressionModel::Constant { value, .. } => vec![*value; x.nrows()],
            RegressionModel::Linear(m) => m.predict_unchecked(x),
            RegressionModel::Logistic(m) => m.predict_unchecked(x),
            RegressionModel::KnnSmoother(m) => m.predict_unchecked(x),
            RegressionModel::StumpBoost(m) => m.predict_unchecked(x),
        }
    }
}

impl RegressionModel {
    pub fn kind(&self) -> &'static str {
        match self {
            RegressionModel::Constant { .. } => "constant",
            RegressionModel::Linear(_) => "linear",
            RegressionModel::Logistic(_) => "logistic",
            RegressionModel::KnnSmoother(_) => "knn-smoother",
            RegressionModel::StumpBoost(_) => "stump-boost",
        }
    }
}

/// Free-function form of [`Predictor::predict`].
pub fn predict<P: Predictor + ?Sized>(model: &P, x: &DMatrix<f64>) -> Result<Vec<f64>> {
    model.predict(x)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(sigmoid(z)) without overflow.
pub(crate) fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

pub(crate) fn clip_prob(p: f64) -> f64 {
    p.clamp(PROB_CLIP, 1.0 - PROB_CLIP)
}
