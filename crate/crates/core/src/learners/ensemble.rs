use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    clip_prob, fit_linear, fit_logistic, fit_smoother, fit_stump_boost, Predictor, RegressionModel,
    Task,
};
use crate::dataio::SeedTree;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CandidateSpec {
    Constant,
    Linear {
        ridge: f64,
    },
    Logistic {
        ridge: f64,
        max_iter: usize,
        tol: f64,
    },
    Smoother {
        k: usize,
    },
    StumpBoost {
        rounds: usize,
        learning_rate: f64,
    },
}

impl CandidateSpec {
    pub fn label(&self) -> String {
        match self {
            CandidateSpec::Constant => "constant".into(),
            CandidateSpec::Linear { .. } => "linear".into(),
            CandidateSpec::Logistic { .. } => "logistic".into(),
            CandidateSpec::Smoother { k } => format!("knn-{k}"),
            CandidateSpec::StumpBoost { rounds, .. } => format!("stump-boost-{rounds}"),
        }
    }

    fn fit(&self, x: &DMatrix<f64>, y: &[f64], task: Task) -> Result<RegressionModel> {
        Ok(match self {
            CandidateSpec::Constant => RegressionModel::Constant {
                dim: x.ncols(),
                value: y.iter().sum::<f64>() / y.len() as f64,
            },
            CandidateSpec::Linear { ridge } => RegressionModel::Linear(fit_linear(x, y, *ridge)?),
            CandidateSpec::Logistic {
                ridge,
                max_iter,
                tol,
            } => RegressionModel::Logistic(fit_logistic(x, y, *ridge, *max_iter, *tol)?),
            CandidateSpec::Smoother { k } => {
                RegressionModel::KnnSmoother(fit_smoother(x, y, (*k).min(y.len()))?)
            }
            CandidateSpec::StumpBoost {
                rounds,
                learning_rate,
            } => RegressionModel::StumpBoost(fit_stump_boost(x, y, task, *rounds, *learning_rate)?),
        })
    }
}

/// Candidate grid and cross-validation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    /// Explicit candidate list; the task-specific default grid when absent.
    pub candidates: Option<Vec<CandidateSpec>>,
    pub smoother_k: Vec<usize>,
    pub boost_rounds: usize,
    pub learning_rate: f64,
    pub ridge: f64,
    pub logistic_max_iter: usize,
    pub logistic_tol: f64,
    pub cv_folds: usize,
    /// Convex stacking instead of discrete selection.
    pub stacking: bool,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            candidates: None,
            smoother_k: vec![10, 50],
            boost_rounds: 200,
            learning_rate: 0.1,
            ridge: 1e-6,
            logistic_max_iter: 100,
            logistic_tol: 1e-8,
            cv_folds: 5,
            stacking: false,
        }
    }
}

impl LearnerConfig {
    pub fn candidates_for(&self, task: Task) -> Vec<CandidateSpec> {
        if let Some(c) = &self.candidates {
            return c.clone();
        }
        let mut out = vec![match task {
            Task::Regression => CandidateSpec::Linear { ridge: self.ridge },
            Task::Probability => CandidateSpec::Logistic {
                ridge: self.ridge,
                max_iter: self.logistic_max_iter,
                tol: self.logistic_tol,
            },
        }];
        out.extend(
            self.smoother_k
                .iter()
                .map(|&k| CandidateSpec::Smoother { k }),
        );
        if self.boost_rounds > 0 {
            out.push(CandidateSpec::StumpBoost {
                rounds: self.boost_rounds,
                learning_rate: self.learning_rate,
            });
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub spec: CandidateSpec,
    pub cv_risk: f64,
    pub weight: f64,
    /// Refit on all rows; only members with positive weight are refit.
    pub model: Option<RegressionModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub task: Task,
    pub dim: usize,
    pub members: Vec<Member>,
    pub warnings: Vec<String>,
}

impl EnsembleModel {
    pub fn weights(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.weight).collect()
    }

    pub fn cv_risks(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.cv_risk).collect()
    }

    /// Label of the highest-weight member.
    pub fn leader(&self) -> String {
        self.members
            .iter()
            .max_by(|a, b| a.weight.total_cmp(&b.weight))
            .map(|m| m.spec.label())
            .unwrap_or_default()
    }

    /// Ensemble from explicit members and weights (no cross-validation).
    pub fn from_members(task: Task, members: Vec<(RegressionModel, f64)>) -> Result<Self> {
        let dim = members
            .first()
            .map(|(m, _)| m.dim())
            .ok_or_else(|| Error::Learner("empty ensemble".into()))?;
        let members = members
            .into_iter()
            .map(|(model, weight)| Member {
                spec: CandidateSpec::Constant,
                cv_risk: 0.0,
                weight,
                model: Some(model),
            })
            .collect();
        Ok(Self {
            task,
            dim,
            members,
            warnings: Vec::new(),
        })
    }
}

impl Predictor for EnsembleModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn predict_unchecked(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let mut out = vec![0.0; x.nrows()];
        for m in &self.members {
            if m.weight <= 0.0 {
                continue;
            }
            let model = m.model.as_ref().expect("positive-weight member is fitted");
            for (o, p) in out.iter_mut().zip(model.predict_unchecked(x)) {
                *o += m.weight * p;
            }
        }
        if self.task == Task::Probability {
            out.iter_mut().for_each(|p| *p = clip_prob(*p));
        }
        out
    }
}

fn loss(task: Task, pred: f64, y: f64) -> f64 {
    match task {
        Task::Regression => (pred - y) * (pred - y),
        Task::Probability => {
            let p = clip_prob(pred);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        }
    }
}

fn rows(x: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), x.ncols(), |r, c| x[(idx[r], c)])
}

/// Cross-validated super learner over the configured candidate grid.
///
/// Each candidate's held-out risk (squared error, or log loss for the
/// probability task) is estimated with `folds`-fold CV. Discrete selection puts
/// all weight on the lowest risk (first on ties); stacking solves a
/// simplex-constrained least squares on the held-out predictions. Candidates
/// that fail to fit are dropped with a warning.
pub fn fit_ensemble(
    x: &DMatrix<f64>,
    y: &[f64],
    task: Task,
    folds: usize,
    seed: u64,
    cfg: &LearnerConfig,
) -> Result<EnsembleModel> {
    let n = x.nrows();
    if y.len() != n {
        return Err(Error::Learner(format!("{n} rows but {} targets", y.len())));
    }
    if folds < 2 || folds > n {
        return Err(Error::Learner(format!(
            "ensemble CV needs 2 <= folds <= n, got {folds} folds for {n} rows"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut SeedTree::new(seed).child(0xC5).rng());
    let mut labels = vec![0; n];
    for (slot, &i) in order.iter().enumerate() {
        labels[i] = slot % folds;
    }
    let splits: Vec<(Vec<usize>, Vec<usize>)> = (0..folds)
        .map(|f| {
            let test: Vec<usize> = (0..n).filter(|&i| labels[i] == f).collect();
            let train: Vec<usize> = (0..n).filter(|&i| labels[i] != f).collect();
            (train, test)
        })
        .collect();
    let split_data: Vec<_> = splits
        .iter()
        .map(|(tr, te)| {
            let ytr: Vec<f64> = tr.iter().map(|&i| y[i]).collect();
            (rows(x, tr), ytr, rows(x, te))
        })
        .collect();

    let mut warnings = Vec::new();
    let mut survivors: Vec<(CandidateSpec, f64, Vec<f64>)> = Vec::new();
    'cand: for spec in cfg.candidates_for(task) {
        let mut oof = vec![0.0; n];
        for ((_, test), (xtr, ytr, xte)) in splits.iter().zip(&split_data) {
            let pred = match spec.fit(xtr, ytr, task) {
                Ok(m) => m.predict_unchecked(xte),
                Err(e) => {
                    warnings.push(format!("dropped {}: {e}", spec.label()));
                    continue 'cand;
                }
            };
            if pred.iter().any(|p| !p.is_finite()) {
                warnings.push(format!("dropped {}: non-finite predictions", spec.label()));
                continue 'cand;
            }
            for (&i, p) in test.iter().zip(pred) {
                oof[i] = p;
            }
        }
        let risk = oof
            .iter()
            .zip(y)
            .map(|(&p, &yi)| loss(task, p, yi))
            .sum::<f64>()
            / n as f64;
        if !risk.is_finite() {
            warnings.push(format!("dropped {}: non-finite CV risk", spec.label()));
            continue;
        }
        survivors.push((spec, risk, oof));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    if survivors.is_empty() {
        return Err(Error::Learner(format!(
            "every ensemble candidate failed: {}",
            warnings.join("; ")
        )));
    }

    let weights = if cfg.stacking && survivors.len() > 1 {
        let z = DMatrix::from_fn(n, survivors.len(), |i, c| survivors[c].2[i]);
        simplex_least_squares(&z, y)
    } else {
        let mut best = 0;
        for (c, s) in survivors.iter().enumerate() {
            if s.1 < survivors[best].1 {
                best = c;
            }
        }
        let mut w = vec![0.0; survivors.len()];
        w[best] = 1.0;
        w
    };

    let mut members = Vec::with_capacity(survivors.len());
    for ((spec, cv_risk, _), weight) in survivors.into_iter().zip(weights) {
        let model = if weight > 0.0 {
            Some(spec.fit(x, y, task)?)
        } else {
            None
        };
        members.push(Member {
            spec,
            cv_risk,
            weight,
            model,
        });
    }
    Ok(EnsembleModel {
        task,
        dim: x.ncols(),
        members,
        warnings,
    })
}

/// `argmin |y - Z w|^2` over the probability simplex, by projected gradient.
pub fn simplex_least_squares(z: &DMatrix<f64>, y: &[f64]) -> Vec<f64> {
    let m = z.ncols();
    let gram = z.tr_mul(z);
    let zty: Vec<f64> = (0..m)
        .map(|c| z.column(c).iter().zip(y).map(|(a, b)| a * b).sum())
        .collect();
    let lipschitz = 2.0 * gram.trace().max(1e-300);
    let mut w = vec![1.0 / m as f64; m];
    for _ in 0..5000 {
        let grad: Vec<f64> = (0..m)
            .map(|r| 2.0 * ((0..m).map(|c| gram[(r, c)] * w[c]).sum::<f64>() - zty[r]))
            .collect();
        let stepped: Vec<f64> = w
            .iter()
            .zip(&grad)
            .map(|(wi, g)| wi - g / lipschitz)
            .collect();
        let next = project_to_simplex(&stepped);
        let delta: f64 = next.iter().zip(&w).map(|(a, b)| (a - b).abs()).sum();
        w = next;
        if delta < 1e-13 {
            break;
        }
    }
    w
}

fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut css = 0.0;
    let mut theta = 0.0;
    for (k, &uk) in u.iter().enumerate() {
        css += uk;
        let t = (css - 1.0) / (k as f64 + 1.0);
        if uk - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_data(n: usize) -> (DMatrix<f64>, Vec<f64>) {
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64 / n as f64 * 4.0 - 2.0);
        let y = (0..n).map(|i| 1.0 + 3.0 * x[(i, 0)]).collect();
        (x, y)
    }

    #[test]
    fn selects_linear_on_linear_data() {
        let (x, y) = linear_data(100);
        let cfg = LearnerConfig {
            candidates: Some(vec![
                CandidateSpec::Constant,
                CandidateSpec::Linear { ridge: 0.0 },
            ]),
            ..Default::default()
        };
        let e = fit_ensemble(&x, &y, Task::Regression, 5, 3, &cfg).unwrap();
        assert_eq!(e.weights(), vec![0.0, 1.0]);
        assert!(e.cv_risks()[1] < e.cv_risks()[0]);
    }

    #[test]
    fn same_seed_same_weights() {
        let n = 120;
        let x = DMatrix::from_fn(n, 2, |i, j| ((i * (j + 2)) % 13) as f64);
        let y: Vec<f64> = (0..n).map(|i| ((i * 5) % 9) as f64 + x[(i, 0)]).collect();
        let cfg = LearnerConfig {
            stacking: true,
            boost_rounds: 20,
            ..Default::default()
        };
        let a = fit_ensemble(&x, &y, Task::Regression, 5, 7, &cfg).unwrap();
        let b = fit_ensemble(&x, &y, Task::Regression, 5, 7, &cfg).unwrap();
        assert_eq!(a.weights(), b.weights());
        assert_eq!(a, b);
    }

    #[test]
    fn discrete_selection_matches_argmin() {
        let n = 150;
        let x = DMatrix::from_fn(n, 1, |i, _| (i as f64 * 0.37).sin() * 3.0);
        let y: Vec<f64> = (0..n).map(|i| (x[(i, 0)] * 2.0).cos()).collect();
        let e = fit_ensemble(&x, &y, Task::Regression, 5, 1, &LearnerConfig::default()).unwrap();
        let risks = e.cv_risks();
        let argmin = (0..risks.len())
            .min_by(|&a, &b| risks[a].total_cmp(&risks[b]))
            .unwrap();
        assert_eq!(e.weights()[argmin], 1.0);
    }

    #[test]
    fn stacked_prediction_within_candidate_range() {
        let n = 100;
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64 / 10.0);
        let y: Vec<f64> = (0..n)
            .map(|i| (i as f64 / 10.0).sqrt() + ((i % 4) as f64) * 0.2)
            .collect();
        let cfg = LearnerConfig {
            stacking: true,
            boost_rounds: 30,
            ..Default::default()
        };
        let e = fit_ensemble(&x, &y, Task::Regression, 5, 2, &cfg).unwrap();
        let w = e.weights();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(w.iter().all(|&v| v >= 0.0));
        let ens = e.predict(&x).unwrap();
        let preds: Vec<Vec<f64>> = e
            .members
            .iter()
            .filter_map(|m| m.model.as_ref())
            .map(|m| m.predict(&x).unwrap())
            .collect();
        for i in 0..n {
            let lo = preds.iter().map(|p| p[i]).fold(f64::INFINITY, f64::min);
            let hi = preds.iter().map(|p| p[i]).fold(f64::NEG_INFINITY, f64::max);
            assert!(ens[i] >= lo - 1e-12 && ens[i] <= hi + 1e-12);
        }
    }

    #[test]
    fn equal_weights_average() {
        let x = DMatrix::from_fn(4, 1, |i, _| i as f64);
        let a = RegressionModel::Constant { dim: 1, value: 1.0 };
        let b = RegressionModel::Linear(fit_linear(&x, &[0.0, 2.0, 4.0, 6.0], 0.0).unwrap());
        let e =
            EnsembleModel::from_members(Task::Regression, vec![(a.clone(), 0.5), (b.clone(), 0.5)])
                .unwrap();
        let pa = a.predict(&x).unwrap();
        let pb = b.predict(&x).unwrap();
        for (i, p) in e.predict(&x).unwrap().into_iter().enumerate() {
            assert!((p - 0.5 * (pa[i] + pb[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn probability_predictions_clipped() {
        let x = DMatrix::from_fn(50, 1, |i, _| i as f64);
        let y = vec![1.0; 50];
        let cfg = LearnerConfig {
            candidates: Some(vec![CandidateSpec::Constant]),
            ..Default::default()
        };
        let e = fit_ensemble(&x, &y, Task::Probability, 5, 0, &cfg).unwrap();
        assert_eq!(e.predict(&x).unwrap()[0], 1.0 - 1e-6);
    }

    #[test]
    fn failing_candidates_dropped() {
        let (x, y) = linear_data(20);
        let cfg = LearnerConfig {
            // logistic rejects non-binary targets
            candidates: Some(vec![
                CandidateSpec::Logistic {
                    ridge: 1e-6,
                    max_iter: 10,
                    tol: 1e-8,
                },
                CandidateSpec::Constant,
            ]),
            ..Default::default()
        };
        let e = fit_ensemble(&x, &y, Task::Regression, 4, 0, &cfg).unwrap();
        assert_eq!(e.members.len(), 1);
        assert_eq!(e.warnings.len(), 1);

        let cfg = LearnerConfig {
            candidates: Some(vec![CandidateSpec::Logistic {
                ridge: 1e-6,
                max_iter: 10,
                tol: 1e-8,
            }]),
            ..Default::default()
        };
        assert!(fit_ensemble(&x, &y, Task::Regression, 4, 0, &cfg).is_err());
    }

    #[test]
    fn simplex_solution_on_exact_mixture() {
        let z = DMatrix::from_fn(30, 2, |i, c| {
            if c == 0 {
                i as f64
            } else {
                (i * i) as f64 / 30.0
            }
        });
        let y: Vec<f64> = (0..30)
            .map(|i| 0.25 * z[(i, 0)] + 0.75 * z[(i, 1)])
            .collect();
        let w = simplex_least_squares(&z, &y);
        assert!(
            (w[0] - 0.25).abs() < 1e-6 && (w[1] - 0.75).abs() < 1e-6,
            "{w:?}"
        );
    }
}
