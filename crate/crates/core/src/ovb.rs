//! Omitted-variable-bias bounds on the average treatment effect with a binary
//! treatment.
//!
//! The short parameters `tau_s`, `sigma_s^2 = E[(Y - E[Y|T,X])^2]` and
//! `nu_s^2 = E[alpha_s^2]` are estimated by cross-fitting, and the bounds are
//! `tau_s +- |rho| sigma_s nu_s C_Y C_T` with `C_Y^2 = eta2_y` and
//! `C_T^2 = eta2_t / (1 - eta2_t)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{assign_folds, Dataset, FoldAssignment, SeedTree};
use crate::error::{Error, Result};
use crate::learners::{LearnerConfig, Task};
use crate::project::{FitSample, ProjectionContext};
use crate::sens::{fit_nuisances, IfSamples, IfTarget, NuisanceValues, ProjectionSpec, DEFAULT_TRUNC};
use crate::stats::{mean, median, sample_variance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OvbConfig {
    pub k: usize,
    pub seed: u64,
    pub learner: LearnerConfig,
    pub trunc: (f64, f64),
}

impl Default for OvbConfig {
    fn default() -> Self {
        Self {
            k: 5,
            seed: 0,
            learner: LearnerConfig::default(),
            trunc: DEFAULT_TRUNC,
        }
    }
}

/// Riesz representer of the ATE functional, `T/pi - (1-T)/(1-pi)`.
///
/// `pi_hat` is clipped to `[1e-6, 1 - 1e-6]`.
pub fn riesz_ate(pi_hat: &[f64], t: &[u8]) -> Vec<f64> {
    pi_hat
        .iter()
        .zip(t)
        .map(|(&p, &ti)| {
            let p = p.clamp(1e-6, 1.0 - 1e-6);
            if ti == 1 {
                1.0 / p
            } else {
                -1.0 / (1.0 - p)
            }
        })
        .collect()
}

/// Cross-fitted short parameters with their per-unit influence functions.
///
/// Influence-function values are in dataset row order; each unit's value is
/// centered at its own fold's estimate. Point estimates are fold medians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OvbShortFit {
    pub tau_s: f64,
    pub sigma2_s: f64,
    pub nu2_s: f64,
    pub if_tau: IfSamples,
    pub if_sigma2: IfSamples,
    pub if_nu2: IfSamples,
    pub alpha_s: Vec<f64>,
    pub folds: FoldAssignment,
    /// `(tau, sigma2, nu2)` per fold.
    pub fold_params: Vec<[f64; 3]>,
    pub projected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OvbBound {
    pub rho: f64,
    pub eta2_y: f64,
    pub eta2_t: f64,
    pub tau_s: f64,
    pub half_width: f64,
    pub tau_lo: f64,
    pub tau_hi: f64,
    pub if_lo: IfSamples,
    pub if_hi: IfSamples,
    pub var_lo: f64,
    pub var_hi: f64,
    pub projected: bool,
}

/// Projection outcome for one (fold, component).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentProjection {
    pub fold: usize,
    pub target: IfTarget,
    pub sweeps: usize,
    pub converged: bool,
    pub diverged: bool,
    pub best_sweep: usize,
    pub delta_history: Vec<f64>,
    pub var_before: f64,
    pub var_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OvbProjection {
    pub short: OvbShortFit,
    pub projected_short: OvbShortFit,
    pub unprojected: Vec<OvbBound>,
    pub projected: Vec<OvbBound>,
    pub diagnostics: Vec<ComponentProjection>,
}

const TARGETS: [IfTarget; 3] = [IfTarget::TauS, IfTarget::Sigma2S, IfTarget::Nu2S];

/// Uncentered per-unit terms whose means estimate `(tau_s, sigma2_s, nu2_s)`,
/// plus the Riesz representer.
fn terms(nv: &NuisanceValues, ds: &Dataset) -> ([Vec<f64>; 3], Vec<f64>) {
    let alpha = riesz_ate(&nv.pi1, ds.treatment());
    let n = ds.n();
    let mut out = [
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    ];
    for u in 0..n {
        let t = ds.treatment()[u];
        let resid = ds.outcome()[u] - nv.mu(t)[u];
        let p = nv.pi1[u];
        out[0].push(alpha[u] * resid + nv.mu1[u] - nv.mu0[u]);
        out[1].push(resid * resid);
        out[2].push(2.0 * (1.0 / p + 1.0 / (1.0 - p)) - alpha[u] * alpha[u]);
    }
    (out, alpha)
}

fn centered(v: &[f64], at: f64) -> Vec<f64> {
    v.iter().map(|x| x - at).collect()
}

struct FoldResult {
    idx: Vec<usize>,
    alpha: Vec<f64>,
    params: [f64; 3],
    ifs: [Vec<f64>; 3],
    projected: Option<([f64; 3], [Vec<f64>; 3])>,
    diagnostics: Vec<ComponentProjection>,
}

fn run_fold(
    ds: &Dataset,
    cfg: &OvbConfig,
    folds: &FoldAssignment,
    k: usize,
    spec: Option<(&ProjectionSpec, bool)>,
) -> Result<FoldResult> {
    let idx = folds.fold_indices(k);
    if idx.len() < 2 {
        return Err(Error::Estimation(
            "fold with a single unit has undefined variance".into(),
        ));
    }
    let train = ds.subset(&folds.train_indices(k));
    let eval = ds.subset(&idx);
    let seed = SeedTree::new(cfg.seed).child(0x0B).child(k as u64).derive_u64();
    let nf = fit_nuisances(&train, &cfg.learner, cfg.trunc, Task::Regression, seed)?;
    let (raw, alpha) = terms(&nf.evaluate(&eval)?, &eval);
    let params = [mean(&raw[0]), mean(&raw[1]), mean(&raw[2])];
    let ifs = [0, 1, 2].map(|c| centered(&raw[c], params[c]));

    let mut result = FoldResult {
        idx,
        alpha,
        params,
        ifs,
        projected: None,
        diagnostics: Vec::new(),
    };
    let Some((spec, single_sweep)) = spec else {
        return Ok(result);
    };
    let mut ap = spec.ap.clone();
    if single_sweep {
        ap.max_sweeps = 1;
    }
    let (ctx, fit_ifs) = match spec.sample {
        FitSample::OffFold => {
            let ctx =
                ProjectionContext::new(&spec.estimator, &train, Some(&eval), &spec.constraints)?;
            let (raw_train, _) = terms(&nf.evaluate(&train)?, &train);
            (ctx, Some([0, 1, 2].map(|c| centered(&raw_train[c], params[c]))))
        }
        FitSample::InFold => (
            ProjectionContext::new(&spec.estimator, &eval, None, &spec.constraints)?,
            None,
        ),
    };
    let mut new_params = params;
    let mut new_ifs: [Vec<f64>; 3] = Default::default();
    for c in 0..3 {
        let run = match &fit_ifs {
            Some(f) => ctx.alternating(&f[c], Some(&result.ifs[c]), &ap)?,
            None => ctx.alternating(&result.ifs[c], None, &ap)?,
        };
        let values = run.eval_values();
        let shift = mean(values);
        new_params[c] = params[c] + shift;
        new_ifs[c] = centered(values, shift);
        if !run.converged && !single_sweep {
            log::warn!(
                "projection did not converge: fold {k}, {:?} after {} sweeps{}",
                TARGETS[c],
                run.sweeps,
                if run.diverged {
                    format!(" (diverging; kept sweep {})", run.best_sweep)
                } else {
                    String::new()
                }
            );
        }
        result.diagnostics.push(ComponentProjection {
            fold: k,
            target: TARGETS[c],
            sweeps: run.sweeps,
            converged: run.converged || single_sweep,
            diverged: run.diverged,
            best_sweep: run.best_sweep,
            delta_history: run.delta_history,
            var_before: sample_variance(&result.ifs[c]),
            var_after: sample_variance(&new_ifs[c]),
        });
    }
    result.projected = Some((new_params, new_ifs));
    Ok(result)
}

fn assemble(
    n: usize,
    folds: &FoldAssignment,
    parts: &[(&[usize], [f64; 3], &[Vec<f64>; 3])],
    alpha: &[f64],
    projected: bool,
) -> OvbShortFit {
    let fold_params: Vec<[f64; 3]> = parts.iter().map(|p| p.1).collect();
    let agg = [0, 1, 2].map(|c| median(&fold_params.iter().map(|p| p[c]).collect::<Vec<_>>()));
    let mut ifs = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for (idx, _, vals) in parts {
        for (pos, &u) in idx.iter().enumerate() {
            for c in 0..3 {
                ifs[c][u] = vals[c][pos];
            }
        }
    }
    let [tau_if, sigma_if, nu_if] = ifs;
    OvbShortFit {
        tau_s: agg[0],
        sigma2_s: agg[1],
        nu2_s: agg[2],
        if_tau: IfSamples::new(tau_if, IfTarget::TauS, None, agg[0]),
        if_sigma2: IfSamples::new(sigma_if, IfTarget::Sigma2S, None, agg[1]),
        if_nu2: IfSamples::new(nu_if, IfTarget::Nu2S, None, agg[2]),
        alpha_s: alpha.to_vec(),
        folds: folds.clone(),
        fold_params,
        projected,
    }
}

fn fit_all(
    ds: &Dataset,
    cfg: &OvbConfig,
    spec: Option<(&ProjectionSpec, bool)>,
) -> Result<(OvbShortFit, Option<OvbShortFit>, Vec<ComponentProjection>)> {
    if cfg.k < 2 {
        return Err(Error::InvalidArgument(format!(
            "K must be >= 2, got {}",
            cfg.k
        )));
    }
    let folds = assign_folds(ds, cfg.k, cfg.seed)?;
    let results: Vec<FoldResult> = (1..=cfg.k)
        .into_par_iter()
        .map(|k| run_fold(ds, cfg, &folds, k, spec))
        .collect::<Result<_>>()?;
    let n = ds.n();
    let mut alpha = vec![0.0; n];
    for r in &results {
        for (pos, &u) in r.idx.iter().enumerate() {
            alpha[u] = r.alpha[pos];
        }
    }
    let plain: Vec<_> = results
        .iter()
        .map(|r| (r.idx.as_slice(), r.params, &r.ifs))
        .collect();
    let short = assemble(n, &folds, &plain, &alpha, false);
    let projected = if spec.is_some() {
        let parts: Vec<_> = results
            .iter()
            .map(|r| {
                let (p, v) = r.projected.as_ref().expect("projected fold");
                (r.idx.as_slice(), *p, v)
            })
            .collect();
        Some(assemble(n, &folds, &parts, &alpha, true))
    } else {
        None
    };
    let diagnostics = results.into_iter().flat_map(|r| r.diagnostics).collect();
    Ok((short, projected, diagnostics))
}

/// Cross-fitted estimates of the short parameters.
pub fn short_fit(ds: &Dataset, cfg: &OvbConfig) -> Result<OvbShortFit> {
    Ok(fit_all(ds, cfg, None)?.0)
}

fn check_bound_args(rho: f64, eta2_y: f64, eta2_t: f64) -> Result<()> {
    if !(rho.abs() <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "rho must lie in [-1, 1], got {rho}"
        )));
    }
    for (name, v) in [("eta2_y", eta2_y), ("eta2_t", eta2_t)] {
        if !(0.0..1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!(
                "{name} must lie in [0, 1), got {v}"
            )));
        }
    }
    Ok(())
}

/// Bounds `tau_s -+ |rho| sigma_s nu_s C_Y C_T` and their influence functions
/// `phi_tau -+ (|rho|/2) C_Y C_T / (sigma_s nu_s) (sigma_s^2 phi_nu2 + nu_s^2 phi_sigma2)`.
///
/// Bound variances are fold medians of `Var(phi) / n_k`.
pub fn ovb_bounds(fit: &OvbShortFit, rho: f64, eta2_y: f64, eta2_t: f64) -> Result<OvbBound> {
    check_bound_args(rho, eta2_y, eta2_t)?;
    let scale = rho.abs() * (eta2_y * eta2_t / (1.0 - eta2_t)).sqrt();
    let (s2, v2) = (fit.sigma2_s.max(0.0), fit.nu2_s.max(0.0));
    let half_width = (scale * scale * s2 * v2).sqrt();
    let sn = (s2 * v2).sqrt();
    let (c_nu, c_sigma) = if scale == 0.0 || sn == 0.0 {
        (0.0, 0.0)
    } else {
        let f = 0.5 * scale / sn;
        (f * s2, f * v2)
    };
    let combo = |sign: f64| -> Vec<f64> {
        (0..fit.if_tau.len())
            .map(|u| {
                fit.if_tau.values[u]
                    + sign * (c_nu * fit.if_nu2.values[u] + c_sigma * fit.if_sigma2.values[u])
            })
            .collect()
    };
    let fold_var = |v: &[f64]| -> f64 {
        let per: Vec<f64> = (1..=fit.folds.k())
            .map(|k| {
                let vals: Vec<f64> = fit.folds.fold_indices(k).iter().map(|&u| v[u]).collect();
                sample_variance(&vals) / vals.len() as f64
            })
            .collect();
        median(&per)
    };
    let (lo_vals, hi_vals) = (combo(-1.0), combo(1.0));
    let (tau_lo, tau_hi) = (fit.tau_s - half_width, fit.tau_s + half_width);
    Ok(OvbBound {
        rho,
        eta2_y,
        eta2_t,
        tau_s: fit.tau_s,
        half_width,
        tau_lo,
        tau_hi,
        var_lo: fold_var(&lo_vals),
        var_hi: fold_var(&hi_vals),
        if_lo: IfSamples::new(lo_vals, IfTarget::BoundLo, None, tau_lo),
        if_hi: IfSamples::new(hi_vals, IfTarget::BoundHi, None, tau_hi),
        projected: fit.projected,
    })
}

/// Bounds along an `eta2` grid (`eta2_y = eta2_t = eta2`) from the plain and
/// the projected short influence functions.
///
/// Each of the three short influence functions is projected separately; the
/// projected fold estimate is the previous one plus the mean of the projected
/// values. With `single_sweep`, every projection runs exactly one sweep.
pub fn ovb_projected(
    ds: &Dataset,
    cfg: &OvbConfig,
    spec: &ProjectionSpec,
    single_sweep: bool,
    rho: f64,
    eta2s: &[f64],
) -> Result<OvbProjection> {
    for &e in eta2s {
        check_bound_args(rho, e, e)?;
    }
    let (short, projected_short, diagnostics) = if spec.constraints.is_empty() {
        let short = short_fit(ds, cfg)?;
        let mut p = short.clone();
        p.projected = true;
        (short, p, Vec::new())
    } else {
        let (s, p, d) = fit_all(ds, cfg, Some((spec, single_sweep)))?;
        (s, p.expect("projected fit"), d)
    };
    let bounds = |f: &OvbShortFit| -> Result<Vec<OvbBound>> {
        eta2s.iter().map(|&e| ovb_bounds(f, rho, e, e)).collect()
    };
    Ok(OvbProjection {
        unprojected: bounds(&short)?,
        projected: bounds(&projected_short)?,
        short,
        projected_short,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(tau: f64, sigma: f64, nu: f64) -> OvbShortFit {
        let ds = Dataset::new(
            vec!["x".into()],
            vec![(0..10).map(f64::from).collect()],
            vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1],
            vec![0.0; 10],
        )
        .unwrap();
        let folds = assign_folds(&ds, 2, 0).unwrap();
        let z = |t| IfSamples::new(vec![0.0; 10], t, None, 0.0);
        OvbShortFit {
            tau_s: tau,
            sigma2_s: sigma * sigma,
            nu2_s: nu * nu,
            if_tau: z(IfTarget::TauS),
            if_sigma2: z(IfTarget::Sigma2S),
            if_nu2: z(IfTarget::Nu2S),
            alpha_s: vec![0.0; 10],
            folds,
            fold_params: vec![[tau, sigma * sigma, nu * nu]; 2],
            projected: false,
        }
    }

    #[test]
    fn riesz_closed_forms() {
        assert_eq!(riesz_ate(&[0.5, 0.5], &[1, 0]), vec![2.0, -2.0]);
        assert_eq!(riesz_ate(&[0.25], &[1]), vec![4.0]);
        assert!(riesz_ate(&[0.0, 1.0], &[1, 0]).iter().all(|a| a.is_finite()));
    }

    #[test]
    fn hand_bound_arithmetic() {
        let b = ovb_bounds(&synthetic(1.0, 2.0, 3.0), 1.0, 0.2, 0.2).unwrap();
        assert!((b.half_width - 6.0 * 0.2f64.sqrt() * 0.25f64.sqrt()).abs() < 1e-12);
        assert!((b.tau_lo + 0.341_640_786_5).abs() < 1e-9);
        assert!((b.tau_hi - 2.341_640_786_5).abs() < 1e-9);
    }

    #[test]
    fn zero_eta_collapses() {
        let b = ovb_bounds(&synthetic(0.7, 2.0, 3.0), 1.0, 0.0, 0.0).unwrap();
        assert_eq!((b.tau_lo, b.tau_hi), (0.7, 0.7));
        let b = ovb_bounds(&synthetic(0.7, 0.0, 3.0), 1.0, 0.3, 0.3).unwrap();
        assert_eq!((b.tau_lo, b.tau_hi), (0.7, 0.7));
    }

    #[test]
    fn bound_arguments_checked() {
        let f = synthetic(0.0, 1.0, 2.0);
        assert!(ovb_bounds(&f, 1.0, 0.1, 1.0).is_err());
        assert!(ovb_bounds(&f, 1.5, 0.1, 0.1).is_err());
        assert!(ovb_bounds(&f, 1.0, -0.1, 0.1).is_err());
    }
}
