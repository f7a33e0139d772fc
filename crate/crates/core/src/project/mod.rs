//! Projection of influence functions onto models defined by conditional
//! independences `X_i _||_ X_j | X_S` among covariates.
//!
//! For one constraint the projection is
//! `phi - E[phi|X_i,X_j,X_S] + E[phi|X_i,X_S] + E[phi|X_j,X_S] - E[phi|X_S]`.
//! Several constraints are handled by sweeping single projections until the
//! change between sweeps is small.
//!
//! Two conditional-mean policies are available. `ExactDiscrete` uses
//! empirical cell means and is exact on discrete data whose empirical law
//! satisfies the constraints. `Polynomial` fits `E[phi|X_i,X_j,X_S]` with
//! cross-validated ridge regression on standardized monomials, then obtains the
//! reduced conditional means by averaging the fit over the empirical `X_j`
//! (resp. `X_i`) and regressing the averages on a monomial basis in `X_S`. The
//! averaging is linear in the coefficients, so it is computed once per
//! constraint rather than per unit.

mod basis;
mod context;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::graphs::CiConstraint;
use crate::sens::IfSamples;
use crate::stats::{mean, sample_variance};

pub use basis::{monomials, VarInfo};
pub use context::{ApRun, ProjectionContext};

/// Largest number of distinct values a column may take under
/// [`CondMeanPolicy::ExactDiscrete`].
pub const MAX_DISCRETE_LEVELS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CondMeanPolicy {
    ExactDiscrete,
    Polynomial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CondMeanEstimator {
    pub policy: CondMeanPolicy,
    /// Candidate total degrees, chosen per projection step by CV.
    pub degrees: Vec<u32>,
    /// Ridge penalty per unit on the standardized basis.
    pub ridge: f64,
    pub cv_folds: usize,
    pub seed: u64,
}

impl Default for CondMeanEstimator {
    fn default() -> Self {
        Self {
            policy: CondMeanPolicy::Polynomial,
            degrees: vec![1, 2, 3],
            ridge: 1e-6,
            cv_folds: 5,
            seed: 0,
        }
    }
}

impl CondMeanEstimator {
    pub fn exact() -> Self {
        Self {
            policy: CondMeanPolicy::ExactDiscrete,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeltaMetric {
    /// Mean squared change made by the last projection of the sweep.
    LastStep,
    /// Mean squared change over the whole sweep.
    FullSweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApConfig {
    pub eps: f64,
    pub max_sweeps: usize,
    pub metric: DeltaMetric,
    /// Stop once the change metric has grown on this many consecutive sweeps
    /// and return the iterate with the smallest change (flagged
    /// non-converged). Zero disables the check.
    pub divergence_patience: usize,
}

impl Default for ApConfig {
    fn default() -> Self {
        Self {
            eps: 4e-4,
            max_sweeps: 25,
            metric: DeltaMetric::LastStep,
            divergence_patience: 3,
        }
    }
}

/// Where the conditional-mean models of a fold's influence function are fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitSample {
    /// On the training folds (influence function evaluated with the fold's
    /// off-fold nuisances), then applied to the held-out fold.
    OffFold,
    /// On the held-out fold itself.
    InFold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionResult {
    pub projected: IfSamples,
    pub sweeps: usize,
    pub delta_history: Vec<f64>,
    pub var_before: f64,
    pub var_after: f64,
    pub converged: bool,
    pub diverged: bool,
    /// `mean(projected) - mean(input)`; zero up to rounding for exact means.
    pub mean_drift: f64,
}

/// Which variables a reduced conditional mean keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Keep {
    /// `E[phi | X_i, X_S]`
    I,
    /// `E[phi | X_j, X_S]`
    J,
    /// `E[phi | X_S]`
    S,
}

/// Fitted `E[phi | X_i, X_j, X_S]`.
#[derive(Debug, Clone, PartialEq)]
pub enum JointModel {
    Cells {
        constraint: CiConstraint,
        /// Cell key (bit patterns of `x_i, x_j, x_S`) to `(sum, count)`.
        cells: Vec<(Vec<u64>, f64, f64)>,
    },
    Polynomial {
        constraint: CiConstraint,
        degree: u32,
        infos: Vec<VarInfo>,
        monos: Vec<Vec<u32>>,
        s_monos: Vec<Vec<u32>>,
        beta: Vec<f64>,
    },
}

fn bits(v: f64) -> u64 {
    if v == 0.0 {
        0
    } else {
        v.to_bits()
    }
}

impl JointModel {
    pub fn constraint(&self) -> &CiConstraint {
        match self {
            JointModel::Cells { constraint, .. } | JointModel::Polynomial { constraint, .. } => {
                constraint
            }
        }
    }

    /// Prediction at raw covariate values `(x_i, x_j, x_S)`.
    pub fn predict(&self, xi: f64, xj: f64, xs: &[f64]) -> Result<f64> {
        let c = self.constraint();
        if xs.len() != c.s.len() {
            return Err(Error::Dimension {
                expected: c.s.len(),
                got: xs.len(),
            });
        }
        match self {
            JointModel::Cells { cells, .. } => {
                let mut key = vec![bits(xi), bits(xj)];
                key.extend(xs.iter().map(|&v| bits(v)));
                cells
                    .iter()
                    .find(|(k, _, _)| *k == key)
                    .map(|(_, s, n)| s / n)
                    .ok_or_else(|| Error::Policy("prediction requested for an unseen cell".into()))
            }
            JointModel::Polynomial {
                infos, monos, beta, ..
            } => {
                let mut z = vec![infos[0].standardize(xi), infos[1].standardize(xj)];
                z.extend(
                    xs.iter()
                        .zip(&infos[2..])
                        .map(|(&v, info)| info.standardize(v)),
                );
                Ok(monos
                    .iter()
                    .zip(beta)
                    .map(|(e, b)| b * basis::eval_monomial(e, &z))
                    .sum())
            }
        }
    }
}

fn single_context(
    ds: &Dataset,
    c: &CiConstraint,
    est: &CondMeanEstimator,
) -> Result<ProjectionContext> {
    ProjectionContext::new(est, ds, None, std::slice::from_ref(c))
}

/// Fit the joint conditional mean of `phi` given `(X_i, X_j, X_S)` on `ds`.
pub fn fit_joint_cond_mean(
    phi: &[f64],
    ds: &Dataset,
    c: &CiConstraint,
    est: &CondMeanEstimator,
) -> Result<JointModel> {
    if phi.len() != ds.n() {
        return Err(Error::Dimension {
            expected: ds.n(),
            got: phi.len(),
        });
    }
    match est.policy {
        CondMeanPolicy::ExactDiscrete => {
            // validates the level count
            single_context(ds, c, est)?;
            let mut cells: Vec<(Vec<u64>, f64, f64)> = Vec::new();
            let cols = c.columns();
            for u in 0..ds.n() {
                let key: Vec<u64> = cols.iter().map(|&k| bits(ds.value(u, k))).collect();
                match cells.iter_mut().find(|(k, _, _)| *k == key) {
                    Some(cell) => {
                        cell.1 += phi[u];
                        cell.2 += 1.0;
                    }
                    None => cells.push((key, phi[u], 1.0)),
                }
            }
            cells.sort_by(|a, b| a.0.cmp(&b.0));
            Ok(JointModel::Cells {
                constraint: c.clone(),
                cells,
            })
        }
        CondMeanPolicy::Polynomial => {
            let ctx = single_context(ds, c, est)?;
            let (b, beta) = ctx.select_poly(0, phi, None).expect("polynomial context");
            let block = &ctx.poly_blocks(0).expect("polynomial context")[b];
            Ok(JointModel::Polynomial {
                constraint: c.clone(),
                degree: block.degree,
                infos: block.infos.clone(),
                monos: block.monos.clone(),
                s_monos: block.s_monos.clone(),
                beta: beta.iter().copied().collect(),
            })
        }
    }
}

/// Reduced conditional mean from a joint model, evaluated at every unit of
/// `ds`.
///
/// For the polynomial model this follows the marginalization recipe
/// literally: for each unit, the joint model is evaluated at the unit's own
/// `x_i` paired with every sample's `(x_j, x_S)`, those values are regressed on
/// the `X_S` basis, and the fit is read off at the unit's `x_S`. `E[phi|X_S]`
/// regresses the `E[phi|X_j,X_S]` values on the `X_S` basis. Cost is
/// quadratic in the sample size. Cell models aggregate cell sums.
pub fn marginalize_cond_mean(joint: &JointModel, ds: &Dataset, keep: Keep) -> Result<Vec<f64>> {
    let c = joint.constraint().clone();
    match joint {
        JointModel::Cells { cells, .. } => {
            // positions within the cell key: 0 = i, 1 = j, 2.. = S
            let pos: Vec<usize> = match keep {
                Keep::I => std::iter::once(0).chain(2..2 + c.s.len()).collect(),
                Keep::J => std::iter::once(1).chain(2..2 + c.s.len()).collect(),
                Keep::S => (2..2 + c.s.len()).collect(),
            };
            let cols: Vec<usize> = pos.iter().map(|&p| c.columns()[p]).collect();
            let mut groups: Vec<(Vec<u64>, f64, f64)> = Vec::new();
            for (key, s, n) in cells {
                let k: Vec<u64> = pos.iter().map(|&p| key[p]).collect();
                match groups.iter_mut().find(|g| g.0 == k) {
                    Some(g) => {
                        g.1 += s;
                        g.2 += n;
                    }
                    None => groups.push((k, *s, *n)),
                }
            }
            (0..ds.n())
                .map(|u| {
                    let k: Vec<u64> = cols.iter().map(|&col| bits(ds.value(u, col))).collect();
                    groups
                        .iter()
                        .find(|g| g.0 == k)
                        .map(|g| g.1 / g.2)
                        .ok_or_else(|| Error::Policy("unit falls in an unseen cell".into()))
                })
                .collect()
        }
        JointModel::Polynomial {
            infos,
            monos,
            s_monos,
            beta,
            ..
        } => {
            let n = ds.n();
            let cols = c.columns();
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|u| {
                    cols.iter()
                        .zip(infos)
                        .map(|(&k, info)| info.standardize(ds.value(u, k)))
                        .collect()
                })
                .collect();
            let zs = DMatrix::from_fn(n, s_monos.len(), |u, t| {
                basis::eval_monomial(&s_monos[t], &rows[u][2..])
            });
            let gram = zs.tr_mul(&zs);
            let chol = gram
                .clone()
                .cholesky()
                .or_else(|| {
                    let mut g = gram.clone();
                    let bump = 1e-10 * g.trace().max(1.0);
                    for k in 0..g.nrows() {
                        g[(k, k)] += bump;
                    }
                    log::warn!("singular conditioning design; ridge fallback applied");
                    g.cholesky()
                })
                .ok_or_else(|| {
                    Error::Projection("conditioning design is not factorizable".into())
                })?;
            let regress_fitted = |v: &[f64]| -> DVector<f64> {
                let coef = chol.solve(&zs.tr_mul(&DVector::from_column_slice(v)));
                &zs * coef
            };
            let joint_at = |z: &[f64]| -> f64 {
                monos
                    .iter()
                    .zip(beta)
                    .map(|(e, b)| b * basis::eval_monomial(e, z))
                    .sum()
            };
            let reduce = |fixed: usize| -> Vec<f64> {
                (0..n)
                    .map(|u| {
                        let values: Vec<f64> = (0..n)
                            .map(|m| {
                                let mut z = rows[m].clone();
                                z[fixed] = rows[u][fixed];
                                joint_at(&z)
                            })
                            .collect();
                        let coef = chol.solve(&zs.tr_mul(&DVector::from_column_slice(&values)));
                        (zs.row(u) * coef)[0]
                    })
                    .collect()
            };
            Ok(match keep {
                Keep::I => reduce(0),
                Keep::J => reduce(1),
                Keep::S => regress_fitted(&reduce(1)).iter().copied().collect(),
            })
        }
    }
}

/// Single-constraint projection, fitting and evaluating on `ds`.
pub fn project_single(
    phi: &IfSamples,
    ds: &Dataset,
    c: &CiConstraint,
    est: &CondMeanEstimator,
) -> Result<IfSamples> {
    let ctx = single_context(ds, c, est)?;
    let (values, _) = ctx.project_step(0, &phi.values, None)?;
    Ok(phi.with_values(values))
}

/// Alternating projection onto all `constraints`, fitting and evaluating on
/// `ds`.
pub fn alternating_project(
    phi: &IfSamples,
    ds: &Dataset,
    constraints: &[CiConstraint],
    est: &CondMeanEstimator,
    ap: &ApConfig,
) -> Result<ProjectionResult> {
    let ctx = ProjectionContext::new(est, ds, None, constraints)?;
    let run = ctx.alternating(&phi.values, None, ap)?;
    Ok(ProjectionResult {
        var_before: sample_variance(&phi.values),
        var_after: sample_variance(&run.fit),
        mean_drift: mean(&run.fit) - mean(&phi.values),
        projected: phi.with_values(run.fit),
        sweeps: run.sweeps,
        delta_history: run.delta_history,
        converged: run.converged,
        diverged: run.diverged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceGain {
    pub var_before: f64,
    pub var_after: f64,
    pub difference: f64,
    /// `Var(E[phi|X_i,X_j]) - Var(E[phi|X_i]) - Var(E[phi|X_j])` from the
    /// fitted conditional means of the input, for marginal constraints.
    pub decomposition: Option<f64>,
}

pub fn variance_gain(
    before: &IfSamples,
    after: &IfSamples,
    ds: &Dataset,
    c: &CiConstraint,
    est: &CondMeanEstimator,
) -> Result<VarianceGain> {
    let var_before = sample_variance(&before.values);
    let var_after = sample_variance(&after.values);
    let decomposition = if c.s.is_empty() {
        let joint = fit_joint_cond_mean(&before.values, ds, c, est)?;
        let fitted: Vec<f64> = (0..ds.n())
            .map(|u| joint.predict(ds.value(u, c.i), ds.value(u, c.j), &[]))
            .collect::<Result<_>>()?;
        let ei = marginalize_cond_mean(&joint, ds, Keep::I)?;
        let ej = marginalize_cond_mean(&joint, ds, Keep::J)?;
        Some(sample_variance(&fitted) - sample_variance(&ei) - sample_variance(&ej))
    } else {
        None
    };
    Ok(VarianceGain {
        var_before,
        var_after,
        difference: var_before - var_after,
        decomposition,
    })
}
