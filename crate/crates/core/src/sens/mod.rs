//! Sensitivity-model estimation of `E[Y(t)]` and the treatment effect under a
//! logistic tilt of the outcome distribution.
//!
//! With a binary outcome, the unobserved-arm law is tilted by `exp(gamma * y)`;
//! `gamma = 0` recovers no unmeasured confounding and the usual AIPW
//! estimator.

mod crossfit;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, SeedTree};
use crate::error::{Error, Result};
use crate::learners::{fit_ensemble, EnsembleModel, LearnerConfig, Predictor, Task};
use crate::stats::{mean, sample_variance};

pub use crossfit::{
    cross_fit_aipw, cross_fit_curve, Aggregate, CurveFit, CurvePoint, FoldProjection,
    ProjectionSpec, SensConfig, SensitivityCurve,
};

/// Largest supported `|gamma|`.
pub const GAMMA_MAX: f64 = 20.0;

/// Default propensity truncation.
pub const DEFAULT_TRUNC: (f64, f64) = (0.01, 0.99);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IfTarget {
    Psi1,
    Psi0,
    Contrast,
    TauS,
    Sigma2S,
    Nu2S,
    BoundLo,
    BoundHi,
}

/// Per-unit influence-function values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IfSamples {
    pub values: Vec<f64>,
    pub target: IfTarget,
    pub gamma: Option<f64>,
    /// Point estimate subtracted inside the influence function.
    pub centered_at: f64,
}

impl IfSamples {
    pub fn new(values: Vec<f64>, target: IfTarget, gamma: Option<f64>, centered_at: f64) -> Self {
        Self {
            values,
            target,
            gamma,
            centered_at,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        mean(&self.values)
    }

    pub fn variance(&self) -> f64 {
        sample_variance(&self.values)
    }

    pub fn with_values(&self, values: Vec<f64>) -> Self {
        Self {
            values,
            ..self.clone()
        }
    }
}

/// Nuisance predictions at a set of units: `pi1 = P(T=1|x)` after truncation
/// and `mu_t = E[Y|x, T=t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceValues {
    pub pi1: Vec<f64>,
    pub mu1: Vec<f64>,
    pub mu0: Vec<f64>,
}

impl NuisanceValues {
    pub fn len(&self) -> usize {
        self.pi1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi1.is_empty()
    }

    pub fn pi(&self, t: u8, unit: usize) -> f64 {
        if t == 1 {
            self.pi1[unit]
        } else {
            1.0 - self.pi1[unit]
        }
    }

    pub fn mu(&self, t: u8) -> &[f64] {
        if t == 1 {
            &self.mu1
        } else {
            &self.mu0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceFit {
    pub propensity: EnsembleModel,
    pub outcome1: EnsembleModel,
    pub outcome0: EnsembleModel,
    pub trunc: (f64, f64),
}

impl NuisanceFit {
    pub fn propensity_at(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        let (lo, hi) = self.trunc;
        Ok(self
            .propensity
            .predict(x)?
            .into_iter()
            .map(|p| p.clamp(lo, hi))
            .collect())
    }

    pub fn evaluate(&self, ds: &Dataset) -> Result<NuisanceValues> {
        let x = ds.covariate_matrix();
        Ok(NuisanceValues {
            pi1: self.propensity_at(&x)?,
            mu1: self.outcome1.predict(&x)?,
            mu0: self.outcome0.predict(&x)?,
        })
    }
}

/// Fit `P(T=1|X)` and the per-arm outcome regressions on `train`.
///
/// `outcome_task` is [`Task::Probability`] for binary outcomes (sensitivity
/// curves) and [`Task::Regression`] for continuous ones (bias bounds).
pub fn fit_nuisances(
    train: &Dataset,
    cfg: &LearnerConfig,
    trunc: (f64, f64),
    outcome_task: Task,
    seed: u64,
) -> Result<NuisanceFit> {
    let (lo, hi) = trunc;
    if !(0.0 < lo && lo <= hi && hi < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "propensity truncation ({lo}, {hi}) must satisfy 0 < lo <= hi < 1"
        )));
    }
    let treated: Vec<usize> = (0..train.n())
        .filter(|&i| train.treatment()[i] == 1)
        .collect();
    let control: Vec<usize> = (0..train.n())
        .filter(|&i| train.treatment()[i] == 0)
        .collect();
    if treated.len() < 2 || control.len() < 2 {
        return Err(Error::Estimation(format!(
            "nuisance fit needs both arms ({} treated, {} control)",
            treated.len(),
            control.len()
        )));
    }
    if outcome_task == Task::Probability {
        if let Some(row) = train.outcome().iter().position(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::Domain {
                row,
                message: "sensitivity estimation needs a binary outcome".into(),
            });
        }
    }
    let tree = SeedTree::new(seed).child(0x4E55);
    let x = train.covariate_matrix();
    let t: Vec<f64> = train.treatment().iter().map(|&t| t as f64).collect();
    let propensity = fit_ensemble(
        &x,
        &t,
        Task::Probability,
        cfg.cv_folds.min(train.n()),
        tree.child(2).derive_u64(),
        cfg,
    )?;
    let arm = |idx: &[usize], label: u64| -> Result<EnsembleModel> {
        let sub = train.subset(idx);
        fit_ensemble(
            &sub.covariate_matrix(),
            sub.outcome(),
            outcome_task,
            cfg.cv_folds.min(idx.len()),
            tree.child(label).derive_u64(),
            cfg,
        )
    };
    Ok(NuisanceFit {
        propensity,
        outcome1: arm(&treated, 1)?,
        outcome0: arm(&control, 0)?,
        trunc,
    })
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !gamma.is_finite() || gamma.abs() > GAMMA_MAX {
        return Err(Error::InvalidArgument(format!(
            "|gamma| must be <= {GAMMA_MAX}, got {gamma}"
        )));
    }
    Ok(())
}

/// `(m0, m1) = (E[e^{gY}|x,t], E[Y e^{gY}|x,t])` for `Y ~ Bernoulli(mu)`.
pub fn tilted_moments(mu: f64, gamma: f64) -> (f64, f64) {
    let m1 = gamma.exp() * mu;
    (m1 + (1.0 - mu), m1)
}

/// `m1 / m0`, the tilted success probability, without forming `e^gamma`.
pub fn tilted_ratio(mu: f64, gamma: f64) -> f64 {
    if mu <= 0.0 {
        0.0
    } else if mu >= 1.0 {
        1.0
    } else {
        crate::learners::sigmoid(gamma + (mu / (1.0 - mu)).ln())
    }
}

/// `ln m0`, evaluated as a log-sum-exp.
fn ln_m0(mu: f64, gamma: f64) -> f64 {
    if mu <= 0.0 {
        0.0
    } else if mu >= 1.0 {
        gamma
    } else {
        let a = gamma + mu.ln();
        let b = (1.0 - mu).ln();
        let m = a.max(b);
        m + ((a - m).exp() + (b - m).exp()).ln()
    }
}

/// Identification functional: mean over units of
/// `mu_t pi_t + (m1/m0) pi_{1-t}`.
pub fn plugin_psi(nv: &NuisanceValues, t: u8, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    if nv.is_empty() {
        return Err(Error::Estimation("plug-in over zero units".into()));
    }
    let mu = nv.mu(t);
    let total: f64 = (0..nv.len())
        .map(|u| mu[u] * nv.pi(t, u) + tilted_ratio(mu[u], gamma) * nv.pi(1 - t, u))
        .sum();
    Ok(total / nv.len() as f64)
}

/// Per-unit efficient influence function of `psi_t(gamma)`.
pub fn eif_samples(
    nv: &NuisanceValues,
    eval: &Dataset,
    t: u8,
    gamma: f64,
    psi: f64,
) -> Result<IfSamples> {
    check_gamma(gamma)?;
    if nv.len() != eval.n() {
        return Err(Error::InvalidArgument(format!(
            "{} nuisance rows for {} units",
            nv.len(),
            eval.n()
        )));
    }
    let mu = nv.mu(t);
    let values = (0..eval.n())
        .map(|u| {
            let y = eval.outcome()[u];
            let ratio = tilted_ratio(mu[u], gamma);
            if eval.treatment()[u] == t {
                let weight = (gamma * y - ln_m0(mu[u], gamma)).exp();
                y + nv.pi(1 - t, u) / nv.pi(t, u) * weight * (y - ratio) - psi
            } else {
                ratio - psi
            }
        })
        .collect();
    let target = if t == 1 {
        IfTarget::Psi1
    } else {
        IfTarget::Psi0
    };
    Ok(IfSamples::new(values, target, Some(gamma), psi))
}

/// Per-unit AIPW influence function `I(T=t)/pi_t (Y - mu_t) + mu_t - psi`.
pub fn aipw_if(nv: &NuisanceValues, eval: &Dataset, t: u8, psi: f64) -> Vec<f64> {
    let mu = nv.mu(t);
    (0..eval.n())
        .map(|u| {
            let ind = (eval.treatment()[u] == t) as u8 as f64;
            ind / nv.pi(t, u) * (eval.outcome()[u] - mu[u]) + mu[u] - psi
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldEstimate {
    pub psi: f64,
    pub variance: f64,
    pub plugin: f64,
    pub phi: IfSamples,
}

/// One-step estimator on a held-out fold: plug-in plus the mean influence
/// function, with variance `Var(phi) / n_k`.
pub fn fold_estimate(
    nv: &NuisanceValues,
    fold: &Dataset,
    t: u8,
    gamma: f64,
) -> Result<FoldEstimate> {
    if fold.n() < 2 {
        return Err(Error::Estimation(
            "fold with a single unit has undefined variance".into(),
        ));
    }
    let plugin = plugin_psi(nv, t, gamma)?;
    let phi = eif_samples(nv, fold, t, gamma, plugin)?;
    Ok(one_step(plugin, phi))
}

pub(crate) fn one_step(plugin: f64, phi: IfSamples) -> FoldEstimate {
    let n = phi.len() as f64;
    FoldEstimate {
        psi: plugin + phi.mean(),
        variance: phi.variance() / n,
        plugin,
        phi,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(t: Vec<u8>, y: Vec<f64>) -> Dataset {
        let n = t.len();
        Dataset::new(
            vec!["x".into()],
            vec![(0..n).map(|i| i as f64).collect()],
            t,
            y,
        )
        .unwrap()
    }

    #[test]
    fn tilted_moment_examples() {
        assert_eq!(tilted_moments(0.5, 0.0), (1.0, 0.5));
        let (m0, m1) = tilted_moments(0.5, 2f64.ln());
        assert!((m0 - 1.5).abs() < 1e-15 && (m1 - 1.0).abs() < 1e-15);
        assert!((tilted_ratio(0.5, 2f64.ln()) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(tilted_moments(0.0, 3.0), (1.0, 0.0));
    }

    #[test]
    fn stable_ratio_matches_direct_form() {
        for &mu in &[0.01, 0.2, 0.5, 0.9, 0.999] {
            for &g in &[-10.0, -1.0, 0.0, 0.5, 7.0] {
                let (m0, m1) = tilted_moments(mu, g);
                assert!((tilted_ratio(mu, g) - m1 / m0).abs() < 1e-12);
                assert!((ln_m0(mu, g) - m0.ln()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gamma_zero_plugin_is_g_formula() {
        let nv = NuisanceValues {
            pi1: vec![0.3, 0.6, 0.9],
            mu1: vec![0.1, 0.5, 0.7],
            mu0: vec![0.2, 0.2, 0.4],
        };
        assert!((plugin_psi(&nv, 1, 0.0).unwrap() - (0.1 + 0.5 + 0.7) / 3.0).abs() < 1e-15);
        assert!((plugin_psi(&nv, 0, 0.0).unwrap() - 0.8 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn plugin_toy_by_hand() {
        // gamma = 1: ratio = e mu / (e mu + 1 - mu)
        let nv = NuisanceValues {
            pi1: vec![0.5, 0.25, 0.8],
            mu1: vec![0.5, 0.2, 0.9],
            mu0: vec![0.0; 3],
        };
        let e = 1f64.exp();
        let r = |mu: f64| e * mu / (e * mu + 1.0 - mu);
        let hand = ((0.5 * 0.5 + r(0.5) * 0.5)
            + (0.2 * 0.25 + r(0.2) * 0.75)
            + (0.9 * 0.8 + r(0.9) * 0.2))
            / 3.0;
        assert!((plugin_psi(&nv, 1, 1.0).unwrap() - hand).abs() < 1e-14);
    }

    #[test]
    fn constant_outcome_model_gives_constant_psi() {
        let nv = NuisanceValues {
            pi1: vec![0.2, 0.7],
            mu1: vec![0.4, 0.4],
            mu0: vec![0.4, 0.4],
        };
        // ratio differs from mu when gamma != 0, so only gamma = 0 is constant
        assert!((plugin_psi(&nv, 1, 0.0).unwrap() - 0.4).abs() < 1e-15);
        let nv = NuisanceValues {
            pi1: vec![0.2, 0.7],
            mu1: vec![1.0, 1.0],
            mu0: vec![1.0, 1.0],
        };
        for g in [-3.0, 0.0, 2.5] {
            assert!((plugin_psi(&nv, 1, g).unwrap() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn eif_four_unit_toy() {
        let ds = toy(vec![1, 1, 0, 0], vec![1.0, 0.0, 1.0, 0.0]);
        let nv = NuisanceValues {
            pi1: vec![0.5, 0.25, 0.8, 0.4],
            mu1: vec![0.6, 0.3, 0.5, 0.2],
            mu0: vec![0.5; 4],
        };
        let g = 1.0f64;
        let e = g.exp();
        let psi = 0.4;
        let m0 = |mu: f64| e * mu + 1.0 - mu;
        let hand = [
            1.0 + (0.5 / 0.5) * (e / m0(0.6)) * (1.0 - e * 0.6 / m0(0.6)) - psi,
            0.0 + (0.75 / 0.25) * (1.0 / m0(0.3)) * (0.0 - e * 0.3 / m0(0.3)) - psi,
            e * 0.5 / m0(0.5) - psi,
            e * 0.2 / m0(0.2) - psi,
        ];
        let phi = eif_samples(&nv, &ds, 1, g, psi).unwrap();
        for (a, b) in phi.values.iter().zip(hand) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn eif_reduces_to_aipw_at_gamma_zero() {
        let ds = toy(vec![1, 0, 1, 0, 1], vec![1.0, 1.0, 0.0, 0.0, 1.0]);
        let nv = NuisanceValues {
            pi1: vec![0.3, 0.5, 0.01, 0.99, 0.7],
            mu1: vec![0.2, 0.9, 0.5, 0.1, 0.6],
            mu0: vec![0.4, 0.3, 0.8, 0.05, 0.5],
        };
        for t in [0, 1] {
            let phi = eif_samples(&nv, &ds, t, 0.0, 0.37).unwrap();
            for (a, b) in phi.values.iter().zip(aipw_if(&nv, &ds, t, 0.37)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn all_ones_gives_zero_if() {
        let ds = toy(vec![1, 0, 1], vec![1.0; 3]);
        let nv = NuisanceValues {
            pi1: vec![0.3, 0.5, 0.6],
            mu1: vec![1.0; 3],
            mu0: vec![1.0; 3],
        };
        for g in [-2.0, 0.0, 3.0] {
            let phi = eif_samples(&nv, &ds, 1, g, 1.0).unwrap();
            assert!(phi.values.iter().all(|v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn fold_estimate_arithmetic_and_duplication() {
        let ds = toy(vec![1, 1, 0, 0], vec![1.0, 0.0, 1.0, 0.0]);
        let nv = NuisanceValues {
            pi1: vec![0.5, 0.25, 0.8, 0.4],
            mu1: vec![0.6, 0.3, 0.5, 0.2],
            mu0: vec![0.5; 4],
        };
        let est = fold_estimate(&nv, &ds, 1, 1.0).unwrap();
        let plug = plugin_psi(&nv, 1, 1.0).unwrap();
        let phi = eif_samples(&nv, &ds, 1, 1.0, plug).unwrap();
        let m = phi.values.iter().sum::<f64>() / 4.0;
        let v = phi.values.iter().map(|p| (p - m).powi(2)).sum::<f64>() / 3.0 / 4.0;
        assert!((est.psi - (plug + m)).abs() < 1e-15);
        assert!((est.variance - v).abs() < 1e-15);

        let idx = [0, 1, 2, 3, 0, 1, 2, 3];
        let doubled = ds.subset(&idx);
        let nv2 = NuisanceValues {
            pi1: idx.iter().map(|&i| nv.pi1[i]).collect(),
            mu1: idx.iter().map(|&i| nv.mu1[i]).collect(),
            mu0: idx.iter().map(|&i| nv.mu0[i]).collect(),
        };
        let est2 = fold_estimate(&nv2, &doubled, 1, 1.0).unwrap();
        assert!((est2.psi - est.psi).abs() < 1e-14);
    }

    #[test]
    fn single_unit_fold_rejected() {
        let ds = toy(vec![1], vec![1.0]);
        let nv = NuisanceValues {
            pi1: vec![0.5],
            mu1: vec![0.5],
            mu0: vec![0.5],
        };
        assert!(fold_estimate(&nv, &ds, 1, 0.0).is_err());
    }

    #[test]
    fn gamma_out_of_range() {
        let nv = NuisanceValues {
            pi1: vec![0.5],
            mu1: vec![0.5],
            mu0: vec![0.5],
        };
        assert!(plugin_psi(&nv, 1, 20.5).is_err());
        assert!(plugin_psi(&nv, 1, -20.0).is_ok());
    }
}
