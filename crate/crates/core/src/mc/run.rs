use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dgp::{generate, DgpKind, DgpSpec};
use crate::dataio::SeedTree;
use crate::error::{Error, Result};
use crate::learners::LearnerConfig;
use crate::ovb::{ovb_projected, OvbConfig, OvbProjection};
use crate::project::{ApConfig, CondMeanEstimator, FitSample};
use crate::sens::{cross_fit_curve, CurveFit, ProjectionSpec, SensConfig, DEFAULT_TRUNC};

/// Share of failed replications above which a run is marked invalid.
pub const MAX_FAILURE_SHARE: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McConfig {
    pub kind: DgpKind,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub k: usize,
    pub gammas: Vec<f64>,
    pub eta2s: Vec<f64>,
    pub rho: f64,
    /// Run only one projection sweep for the bound experiment.
    pub ovb_single_sweep: bool,
    pub estimator: CondMeanEstimator,
    pub ap: ApConfig,
    pub sample: FitSample,
    pub learner: LearnerConfig,
    /// Worker threads; `None` uses the global pool. Not serialized, since
    /// results do not depend on it.
    #[serde(skip)]
    pub jobs: Option<usize>,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            kind: DgpKind::Example1,
            n: 1000,
            reps: 100,
            seed: 1,
            k: 5,
            gammas: vec![-4.0, -2.0, 0.0, 2.0, 4.0],
            eta2s: vec![0.01, 0.05, 0.1, 0.2, 0.25],
            rho: 1.0,
            ovb_single_sweep: true,
            estimator: CondMeanEstimator::default(),
            ap: ApConfig::default(),
            sample: FitSample::OffFold,
            learner: LearnerConfig::default(),
            jobs: None,
        }
    }
}

impl McConfig {
    pub fn new(kind: DgpKind, n: usize, reps: usize, seed: u64) -> Self {
        Self {
            kind,
            n,
            reps,
            seed,
            ..Default::default()
        }
    }

    fn projection(&self) -> ProjectionSpec {
        ProjectionSpec {
            constraints: self.kind.constraints(),
            estimator: self.estimator.clone(),
            ap: self.ap.clone(),
            sample: self.sample,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::Config("reps must be >= 1".into()));
        }
        if self.k < 2 {
            return Err(Error::Config(format!("K must be >= 2, got {}", self.k)));
        }
        if self.jobs == Some(0) {
            return Err(Error::Config("jobs must be >= 1".into()));
        }
        let grid_empty = if self.kind == DgpKind::Ovb {
            self.eta2s.is_empty()
        } else {
            self.gammas.is_empty()
        };
        if grid_empty {
            return Err(Error::Config("empty parameter grid".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Unprojected,
    Projected,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Unprojected => "unprojected",
            Variant::Projected => "projected",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub kind: DgpKind,
    pub n: usize,
    /// `gamma` or `eta2`.
    pub param_name: String,
    pub param: f64,
    pub variant: Variant,
    /// `tau`, `psi1`, `psi0`, `tau_lo` or `tau_hi`.
    pub estimand: String,
    pub mean_estimate: f64,
    pub mean_variance: f64,
    pub reps: usize,
    pub failures: usize,
    /// Mean projection sweeps per (fold, influence function); projected rows only.
    pub mean_sweeps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub config: McConfig,
    pub rows: Vec<McRow>,
    pub reps_ok: usize,
    pub failures: usize,
    pub failure_messages: Vec<String>,
    /// More than [`MAX_FAILURE_SHARE`] of replications failed.
    pub invalid: bool,
    /// Kept out of serialized output so reports stay bit-reproducible.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl McReport {
    pub fn row(&self, param: f64, variant: Variant, estimand: &str) -> Option<&McRow> {
        self.rows
            .iter()
            .find(|r| r.param == param && r.variant == variant && r.estimand == estimand)
    }
}

/// `(param, variant, estimand, estimate, variance, sweeps)` from one replication.
type RepValues = Vec<(f64, Variant, &'static str, f64, f64, Option<f64>)>;

fn sens_values(fit: &CurveFit) -> RepValues {
    let mut out = Vec::new();
    let sweeps = if fit.diagnostics.is_empty() {
        None
    } else {
        Some(fit.diagnostics.iter().map(|d| d.sweeps as f64).sum::<f64>() / fit.diagnostics.len() as f64)
    };
    let mut curves = vec![(Variant::Unprojected, &fit.unprojected, None)];
    if let Some(p) = &fit.projected {
        curves.push((Variant::Projected, p, sweeps));
    }
    for (variant, curve, sw) in curves {
        for p in &curve.points {
            for (name, agg) in [("tau", &p.tau), ("psi1", &p.psi1), ("psi0", &p.psi0)] {
                out.push((p.gamma, variant, name, agg.estimate, agg.variance, sw));
            }
        }
    }
    out
}

fn ovb_values(fit: &OvbProjection) -> RepValues {
    let sweeps = if fit.diagnostics.is_empty() {
        None
    } else {
        Some(fit.diagnostics.iter().map(|d| d.sweeps as f64).sum::<f64>() / fit.diagnostics.len() as f64)
    };
    let mut out = Vec::new();
    for (variant, bounds, sw) in [
        (Variant::Unprojected, &fit.unprojected, None),
        (Variant::Projected, &fit.projected, sweeps),
    ] {
        for b in bounds {
            out.push((b.eta2_y, variant, "tau_lo", b.tau_lo, b.var_lo, sw));
            out.push((b.eta2_y, variant, "tau_hi", b.tau_hi, b.var_hi, sw));
        }
    }
    out
}

fn replication(cfg: &McConfig, r: usize) -> Result<RepValues> {
    let (ds, _) = generate(&DgpSpec::new(cfg.kind, cfg.n, cfg.seed).replication(r))?;
    let seed = SeedTree::new(cfg.seed)
        .child(0x5E)
        .child(r as u64)
        .derive_u64();
    let spec = cfg.projection();
    if cfg.kind == DgpKind::Ovb {
        let ocfg = OvbConfig {
            k: cfg.k,
            seed,
            learner: cfg.learner.clone(),
            trunc: DEFAULT_TRUNC,
        };
        let fit = ovb_projected(&ds, &ocfg, &spec, cfg.ovb_single_sweep, cfg.rho, &cfg.eta2s)?;
        Ok(ovb_values(&fit))
    } else {
        let scfg = SensConfig {
            k: cfg.k,
            seed,
            gammas: cfg.gammas.clone(),
            learner: cfg.learner.clone(),
            trunc: DEFAULT_TRUNC,
        };
        Ok(sens_values(&cross_fit_curve(&ds, &scfg, Some(&spec))?))
    }
}

/// Monte Carlo experiment: every replication generates a dataset and fits
/// both the plain and the projected estimators; rows average over the
/// successful replications.
///
/// Replications run in parallel (bounded by `cfg.jobs`) and are reduced in
/// replication order, so the report does not depend on the worker count.
pub fn run_mc(cfg: &McConfig) -> Result<McReport> {
    cfg.validate()?;
    let start = Instant::now();
    let run = || -> Vec<Result<RepValues>> {
        (0..cfg.reps)
            .into_par_iter()
            .map(|r| replication(cfg, r))
            .collect()
    };
    let results = match cfg.jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    };

    let mut sums: Vec<McRow> = Vec::new();
    let mut sweep_sums: Vec<(f64, usize)> = Vec::new();
    let mut failures = 0;
    let mut failure_messages = Vec::new();
    let mut reps_ok = 0;
    for (r, res) in results.into_iter().enumerate() {
        let values = match res {
            Ok(v) => v,
            Err(e) => {
                failures += 1;
                failure_messages.push(format!("replication {r}: {e}"));
                continue;
            }
        };
        reps_ok += 1;
        for (param, variant, estimand, est, var, sw) in values {
            let pos = sums.iter().position(|row| {
                row.param == param && row.variant == variant && row.estimand == estimand
            });
            let pos = pos.unwrap_or_else(|| {
                sums.push(McRow {
                    kind: cfg.kind,
                    n: cfg.n,
                    param_name: if cfg.kind == DgpKind::Ovb { "eta2" } else { "gamma" }.into(),
                    param,
                    variant,
                    estimand: estimand.into(),
                    mean_estimate: 0.0,
                    mean_variance: 0.0,
                    reps: 0,
                    failures: 0,
                    mean_sweeps: None,
                });
                sweep_sums.push((0.0, 0));
                sums.len() - 1
            });
            let row = &mut sums[pos];
            row.mean_estimate += est;
            row.mean_variance += var;
            row.reps += 1;
            if let Some(s) = sw {
                sweep_sums[pos].0 += s;
                sweep_sums[pos].1 += 1;
            }
        }
    }
    for (row, (s, c)) in sums.iter_mut().zip(&sweep_sums) {
        row.mean_estimate /= row.reps as f64;
        row.mean_variance /= row.reps as f64;
        row.failures = failures;
        if *c > 0 {
            row.mean_sweeps = Some(s / *c as f64);
        }
    }
    sums.sort_by(|a, b| {
        (a.param, a.variant.name(), &a.estimand)
            .partial_cmp(&(b.param, b.variant.name(), &b.estimand))
            .expect("finite grid values")
    });
    let invalid = reps_ok == 0 || failures as f64 > MAX_FAILURE_SHARE * cfg.reps as f64;
    for m in &failure_messages {
        log::warn!("{m}");
    }
    Ok(McReport {
        config: cfg.clone(),
        rows: sums,
        reps_ok,
        failures,
        failure_messages,
        invalid,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    Csv,
    Markdown,
}

impl TableFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(TableFormat::Csv),
            "markdown" | "md" => Ok(TableFormat::Markdown),
            other => Err(Error::Config(format!("unknown table format `{other}`"))),
        }
    }
}

pub const TABLE_COLUMNS: [&str; 11] = [
    "kind", "n", "param", "value", "variant", "estimand", "estimate", "variance", "reps",
    "failures", "sweeps",
];

/// `v` rounded to `digits` significant digits.
fn sig(v: f64, digits: usize) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let mag = v.abs().log10().floor() as i64;
    let decimals = (digits as i64 - 1 - mag).max(0) as usize;
    format!("{v:.decimals$}")
}

/// Render a report: estimates to 4 significant digits, variances to 4
/// decimals.
pub fn emit_table(report: &McReport, format: TableFormat) -> Result<String> {
    if report.rows.is_empty() {
        return Err(Error::InvalidArgument("empty report".into()));
    }
    let cells = |r: &McRow| -> Vec<String> {
        vec![
            r.kind.name().into(),
            r.n.to_string(),
            r.param_name.clone(),
            format!("{}", r.param),
            r.variant.name().into(),
            r.estimand.clone(),
            sig(r.mean_estimate, 4),
            format!("{:.4}", r.mean_variance),
            r.reps.to_string(),
            r.failures.to_string(),
            r.mean_sweeps.map(|s| format!("{s:.2}")).unwrap_or_default(),
        ]
    };
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let io = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
            w.write_record(TABLE_COLUMNS).map_err(io)?;
            for r in &report.rows {
                w.write_record(cells(r)).map_err(io)?;
            }
            let bytes = w
                .into_inner()
                .map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
            out = String::from_utf8(bytes).expect("csv output is utf-8");
        }
        TableFormat::Markdown => {
            let _ = writeln!(out, "| {} |", TABLE_COLUMNS.join(" | "));
            let _ = writeln!(out, "|{}", "---|".repeat(TABLE_COLUMNS.len()));
            for r in &report.rows {
                let _ = writeln!(out, "| {} |", cells(r).join(" | "));
            }
        }
    }
    Ok(out)
}
