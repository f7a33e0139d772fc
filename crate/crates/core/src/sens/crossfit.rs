use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{eif_samples, fit_nuisances, fold_estimate, one_step, IfTarget, DEFAULT_TRUNC};
use crate::dataio::{assign_folds, Dataset, FoldAssignment, SeedTree};
use crate::error::{Error, Result};
use crate::graphs::CiConstraint;
use crate::learners::{LearnerConfig, Task};
use crate::project::{ApConfig, CondMeanEstimator, FitSample, ProjectionContext};
use crate::stats::{mean, median, sample_variance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensConfig {
    pub k: usize,
    pub seed: u64,
    pub gammas: Vec<f64>,
    pub learner: LearnerConfig,
    pub trunc: (f64, f64),
}

impl Default for SensConfig {
    fn default() -> Self {
        Self {
            k: 5,
            seed: 0,
            gammas: vec![-4.0, -2.0, 0.0, 2.0, 4.0],
            learner: LearnerConfig::default(),
            trunc: DEFAULT_TRUNC,
        }
    }
}

/// Constraints and settings for replacing each fold's influence function by
/// its alternating projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSpec {
    pub constraints: Vec<CiConstraint>,
    pub estimator: CondMeanEstimator,
    pub ap: ApConfig,
    pub sample: FitSample,
}

impl ProjectionSpec {
    pub fn new(constraints: Vec<CiConstraint>) -> Self {
        Self {
            constraints,
            estimator: CondMeanEstimator::default(),
            ap: ApConfig::default(),
            sample: FitSample::OffFold,
        }
    }
}

/// Median-of-folds estimate with a normal 95% interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub estimate: f64,
    pub variance: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub fold_estimates: Vec<f64>,
    pub fold_variances: Vec<f64>,
}

impl Aggregate {
    pub fn from_folds(fold_estimates: Vec<f64>, fold_variances: Vec<f64>) -> Self {
        let estimate = median(&fold_estimates);
        let variance = median(&fold_variances);
        let half = 1.96 * variance.sqrt();
        Self {
            estimate,
            variance,
            ci_lo: estimate - half,
            ci_hi: estimate + half,
            fold_estimates,
            fold_variances,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub gamma: f64,
    pub psi1: Aggregate,
    pub psi0: Aggregate,
    pub tau: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityCurve {
    pub k: usize,
    pub projected: bool,
    pub points: Vec<CurvePoint>,
}

impl SensitivityCurve {
    pub fn gammas(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.gamma).collect()
    }

    pub fn at(&self, gamma: f64) -> Option<&CurvePoint> {
        self.points.iter().find(|p| p.gamma == gamma)
    }
}

/// Alternating-projection outcome for one (fold, gamma, target).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldProjection {
    pub fold: usize,
    pub gamma: f64,
    pub target: IfTarget,
    pub sweeps: usize,
    pub converged: bool,
    /// Cut short by the divergence check; values are from `best_sweep`.
    pub diverged: bool,
    pub best_sweep: usize,
    pub delta_history: Vec<f64>,
    pub var_before: f64,
    pub var_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveFit {
    pub folds: FoldAssignment,
    pub unprojected: SensitivityCurve,
    pub projected: Option<SensitivityCurve>,
    pub diagnostics: Vec<FoldProjection>,
}

impl CurveFit {
    pub fn nonconverged(&self) -> Vec<&FoldProjection> {
        self.diagnostics.iter().filter(|d| !d.converged).collect()
    }
}

/// One fold's (psi1, var1, psi0, var0, tau, var_tau) for a single gamma.
#[derive(Debug, Clone, Copy)]
struct FoldPoint([f64; 6]);

impl FoldPoint {
    fn from_ifs(psi1: f64, phi1: &[f64], psi0: f64, phi0: &[f64]) -> Self {
        let n = phi1.len() as f64;
        let contrast: Vec<f64> = phi1.iter().zip(phi0).map(|(a, b)| a - b).collect();
        FoldPoint([
            psi1,
            sample_variance(phi1) / n,
            psi0,
            sample_variance(phi0) / n,
            psi1 - psi0,
            sample_variance(&contrast) / n,
        ])
    }
}

struct FoldOutput {
    plain: Vec<FoldPoint>,
    projected: Vec<FoldPoint>,
    diagnostics: Vec<FoldProjection>,
}

fn check_config(cfg: &SensConfig, ds: &Dataset) -> Result<()> {
    if cfg.k < 2 {
        return Err(Error::InvalidArgument(format!(
            "K must be >= 2, got {}",
            cfg.k
        )));
    }
    if cfg.gammas.is_empty() {
        return Err(Error::InvalidArgument("empty gamma grid".into()));
    }
    if let Some(row) = ds.outcome().iter().position(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Domain {
            row,
            message: "sensitivity estimation needs a binary outcome".into(),
        });
    }
    Ok(())
}

pub(crate) fn fold_seed(seed: u64, fold: usize) -> u64 {
    SeedTree::new(seed)
        .child(0xF17)
        .child(fold as u64)
        .derive_u64()
}

/// Cross-fitted one-step sensitivity curve.
///
/// Nuisances for fold `k` are trained on the other folds; plug-in and
/// influence function are evaluated on fold `k`. Fold estimates and fold
/// variances are combined by their medians. With `projection`, each fold's
/// influence functions for `E[Y(1)]` and `E[Y(0)]` are additionally replaced by
/// their alternating projections, giving a second curve from the same folds
/// and nuisances.
pub fn cross_fit_curve(
    ds: &Dataset,
    cfg: &SensConfig,
    projection: Option<&ProjectionSpec>,
) -> Result<CurveFit> {
    check_config(cfg, ds)?;
    let projection = projection.filter(|p| !p.constraints.is_empty());
    let folds = assign_folds(ds, cfg.k, cfg.seed)?;
    let outputs: Vec<FoldOutput> = (1..=cfg.k)
        .into_par_iter()
        .map(|k| run_fold(ds, cfg, projection, &folds, k))
        .collect::<Result<_>>()?;

    let curve = |pick: &dyn Fn(&FoldOutput) -> &Vec<FoldPoint>, projected: bool| {
        let points = cfg
            .gammas
            .iter()
            .enumerate()
            .map(|(g, &gamma)| {
                let col = |c: usize| outputs.iter().map(|o| pick(o)[g].0[c]).collect::<Vec<_>>();
                CurvePoint {
                    gamma,
                    psi1: Aggregate::from_folds(col(0), col(1)),
                    psi0: Aggregate::from_folds(col(2), col(3)),
                    tau: Aggregate::from_folds(col(4), col(5)),
                }
            })
            .collect();
        SensitivityCurve {
            k: cfg.k,
            projected,
            points,
        }
    };
    let unprojected = curve(&|o| &o.plain, false);
    let projected = projection.map(|_| curve(&|o| &o.projected, true));
    let diagnostics: Vec<FoldProjection> =
        outputs.into_iter().flat_map(|o| o.diagnostics).collect();
    for d in diagnostics.iter().filter(|d| !d.converged) {
        log::warn!(
            "projection did not converge: fold {}, gamma {}, {:?} after {} sweeps{}",
            d.fold,
            d.gamma,
            d.target,
            d.sweeps,
            if d.diverged {
                format!(" (diverging; kept sweep {})", d.best_sweep)
            } else {
                String::new()
            }
        );
    }
    Ok(CurveFit {
        folds,
        unprojected,
        projected,
        diagnostics,
    })
}

fn run_fold(
    ds: &Dataset,
    cfg: &SensConfig,
    projection: Option<&ProjectionSpec>,
    folds: &FoldAssignment,
    k: usize,
) -> Result<FoldOutput> {
    let train = ds.subset(&folds.train_indices(k));
    let eval = ds.subset(&folds.fold_indices(k));
    let nf = fit_nuisances(
        &train,
        &cfg.learner,
        cfg.trunc,
        Task::Probability,
        fold_seed(cfg.seed, k),
    )?;
    let nv = nf.evaluate(&eval)?;

    let setup = match projection {
        None => None,
        Some(spec) => Some(match spec.sample {
            FitSample::OffFold => (
                spec,
                ProjectionContext::new(&spec.estimator, &train, Some(&eval), &spec.constraints)?,
                Some(nf.evaluate(&train)?),
            ),
            FitSample::InFold => (
                spec,
                ProjectionContext::new(&spec.estimator, &eval, None, &spec.constraints)?,
                None,
            ),
        }),
    };

    let mut out = FoldOutput {
        plain: Vec::with_capacity(cfg.gammas.len()),
        projected: Vec::new(),
        diagnostics: Vec::new(),
    };
    for &gamma in &cfg.gammas {
        let e1 = fold_estimate(&nv, &eval, 1, gamma)?;
        let e0 = fold_estimate(&nv, &eval, 0, gamma)?;
        out.plain.push(FoldPoint::from_ifs(
            e1.psi,
            &e1.phi.values,
            e0.psi,
            &e0.phi.values,
        ));

        let Some((spec, ctx, nv_train)) = &setup else {
            continue;
        };
        let mut projected = Vec::with_capacity(2);
        for est in [&e1, &e0] {
            let t = if est.phi.target == IfTarget::Psi1 {
                1
            } else {
                0
            };
            let run = match nv_train {
                Some(nvt) => {
                    let phi_fit = eif_samples(nvt, &train, t, gamma, est.plugin)?;
                    ctx.alternating(&phi_fit.values, Some(&est.phi.values), &spec.ap)?
                }
                None => ctx.alternating(&est.phi.values, None, &spec.ap)?,
            };
            let values = run.eval_values().to_vec();
            out.diagnostics.push(FoldProjection {
                fold: k,
                gamma,
                target: est.phi.target,
                sweeps: run.sweeps,
                converged: run.converged,
                diverged: run.diverged,
                best_sweep: run.best_sweep,
                delta_history: run.delta_history.clone(),
                var_before: est.phi.variance(),
                var_after: sample_variance(&values),
            });
            projected.push(one_step(est.plugin, est.phi.with_values(values)));
        }
        out.projected.push(FoldPoint::from_ifs(
            projected[0].psi,
            &projected[0].phi.values,
            projected[1].psi,
            &projected[1].phi.values,
        ));
    }
    Ok(out)
}

/// Cross-fitted AIPW treatment effect using the same folds and nuisance fits
/// as [`cross_fit_curve`] with the same configuration.
pub fn cross_fit_aipw(ds: &Dataset, cfg: &SensConfig) -> Result<Aggregate> {
    check_config(cfg, ds)?;
    let folds = assign_folds(ds, cfg.k, cfg.seed)?;
    let per_fold: Vec<(f64, f64)> = (1..=cfg.k)
        .into_par_iter()
        .map(|k| {
            let train = ds.subset(&folds.train_indices(k));
            let eval = ds.subset(&folds.fold_indices(k));
            let nf = fit_nuisances(
                &train,
                &cfg.learner,
                cfg.trunc,
                Task::Probability,
                fold_seed(cfg.seed, k),
            )?;
            let nv = nf.evaluate(&eval)?;
            let terms: Vec<f64> = (0..eval.n())
                .map(|u| {
                    let t = eval.treatment()[u] as f64;
                    let y = eval.outcome()[u];
                    nv.mu1[u] - nv.mu0[u] + t * (y - nv.mu1[u]) / nv.pi1[u]
                        - (1.0 - t) * (y - nv.mu0[u]) / (1.0 - nv.pi1[u])
                })
                .collect();
            Ok((mean(&terms), sample_variance(&terms) / eval.n() as f64))
        })
        .collect::<Result<_>>()?;
    Ok(Aggregate::from_folds(
        per_fold.iter().map(|p| p.0).collect(),
        per_fold.iter().map(|p| p.1).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn odd_fold_median_is_middle_order_statistic() {
        let a = Aggregate::from_folds(vec![0.3, -1.0, 0.7, 0.1, 0.2], vec![1.0; 5]);
        assert_eq!(a.estimate, 0.2);
        assert!((a.ci_hi - a.estimate - 1.96).abs() < 1e-15);
    }

    #[test]
    fn aggregation_invariant_to_fold_relabeling() {
        let a = Aggregate::from_folds(vec![0.3, -1.0, 0.7, 0.1], vec![0.2, 0.1, 0.4, 0.3]);
        let b = Aggregate::from_folds(vec![0.7, 0.1, 0.3, -1.0], vec![0.4, 0.3, 0.2, 0.1]);
        assert_eq!((a.estimate, a.variance), (b.estimate, b.variance));
    }
}
