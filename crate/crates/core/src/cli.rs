//! Command-line front end: `dsep`, `constraints`, `estimate`, `ovb` and
//! `simulate`.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors, 1 when
//! estimation fails.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataio::{load_csv, Dataset, Schema};
use crate::error::{Error, Result};
use crate::graphs::{
    format_constraints, implied_constraints, markov_constraints, parse_constraints, parse_dag,
};
use crate::learners::LearnerConfig;
use crate::mc::{emit_table, run_mc, DgpKind, McConfig, TableFormat};
use crate::ovb::{ovb_projected, OvbConfig};
use crate::project::{ApConfig, CondMeanEstimator, DeltaMetric, FitSample};
use crate::sens::{cross_fit_curve, ProjectionSpec, SensConfig, DEFAULT_TRUNC};

#[derive(Debug, Parser)]
#[command(name = "sensproj", version, about = "Sensitivity analysis with influence-function projection")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Query whether two vertices are d-separated given a set.
    Dsep(DsepArgs),
    /// List the independences among covariates implied by a DAG.
    Constraints(ConstraintsArgs),
    /// Sensitivity curve of the treatment effect from a CSV file.
    Estimate(EstimateArgs),
    /// Omitted-variable-bias bounds from a CSV file.
    Ovb(OvbArgs),
    /// Monte Carlo experiment on a built-in design.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
struct DsepArgs {
    #[arg(long)]
    dag: PathBuf,
    #[arg(long)]
    a: String,
    #[arg(long)]
    b: String,
    /// Comma-separated conditioning set.
    #[arg(long, value_delimiter = ',')]
    given: Vec<String>,
    /// Directory for summary.json.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ConstraintsArgs {
    #[arg(long)]
    dag: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    covariates: Vec<String>,
    #[arg(long, default_value_t = 1)]
    max_cond: usize,
    /// Emit the pairwise local Markov list in topological order instead of
    /// every implied independence up to `--max-cond`.
    #[arg(long)]
    markov: bool,
    /// Constraint file to write; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Options shared by `estimate` and `ovb`.
#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    /// Constraint file; no projection when absent.
    #[arg(long)]
    constraints: Option<PathBuf>,
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    max_sweeps: Option<usize>,
    /// Fit projection models on the held-out fold instead of the training folds.
    #[arg(long)]
    in_fold: bool,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[command(flatten)]
    common: DataArgs,
    /// Comma-separated gamma grid.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    gamma: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
struct OvbArgs {
    #[command(flatten)]
    common: DataArgs,
    #[arg(long, allow_hyphen_values = true)]
    rho: Option<f64>,
    /// Comma-separated grid, used for both eta2_y and eta2_t.
    #[arg(long, value_delimiter = ',')]
    eta2: Option<Vec<f64>>,
    /// One projection sweep per influence function.
    #[arg(long)]
    single_sweep: bool,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// example1, example2, misspec or ovb.
    #[arg(long)]
    spec: String,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    gamma: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    eta2: Option<Vec<f64>>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    max_sweeps: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// csv or markdown.
    #[arg(long, default_value = "markdown")]
    format: String,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

/// Values readable from a `--config` file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub k: Option<usize>,
    pub seed: Option<u64>,
    pub gammas: Option<Vec<f64>>,
    pub eta2s: Option<Vec<f64>>,
    pub rho: Option<f64>,
    pub eps: Option<f64>,
    pub max_sweeps: Option<usize>,
    pub delta_metric: Option<DeltaMetric>,
    pub divergence_patience: Option<usize>,
    pub fit_sample: Option<FitSample>,
    pub single_sweep: Option<bool>,
    pub n: Option<usize>,
    pub reps: Option<usize>,
    pub learner: Option<LearnerConfig>,
    pub estimator: Option<CondMeanEstimator>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = read(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn load(path: Option<&Path>) -> Result<Self> {
        path.map(Self::from_file).transpose().map(Option::unwrap_or_default)
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("JSON values serialize");
    write(path, &(text + "\n"))
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("no such file: {}", path.display())))
    }
}

fn check_k(k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::Config(format!("K must be >= 2, got {k}")));
    }
    Ok(())
}

fn ap_config(eps: Option<f64>, max_sweeps: Option<usize>, rc: &RunConfig) -> Result<ApConfig> {
    let mut ap = ApConfig::default();
    if let Some(e) = eps.or(rc.eps) {
        ap.eps = e;
    }
    if let Some(m) = max_sweeps.or(rc.max_sweeps) {
        ap.max_sweeps = m;
    }
    if let Some(m) = rc.delta_metric {
        ap.metric = m;
    }
    if let Some(p) = rc.divergence_patience {
        ap.divergence_patience = p;
    }
    if !(ap.eps > 0.0) {
        return Err(Error::Config(format!("eps must be > 0, got {}", ap.eps)));
    }
    if ap.max_sweeps == 0 {
        return Err(Error::Config("max_sweeps must be >= 1".into()));
    }
    Ok(ap)
}

fn check_eta2(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("empty eta2 grid".into()));
    }
    if let Some(e) = grid.iter().find(|e| !(0.0..1.0).contains(*e)) {
        return Err(Error::Config(format!("eta2 must lie in [0, 1), got {e}")));
    }
    Ok(())
}

fn fmt_num(v: f64) -> String {
    format!("{v}")
}

/// Dataset, projection spec and settings shared by `estimate` and `ovb`.
struct Prepared {
    ds: Dataset,
    rc: RunConfig,
    k: usize,
    seed: u64,
    projection: Option<ProjectionSpec>,
}

fn prepare(a: &DataArgs) -> Result<Prepared> {
    for p in [Some(&a.data), Some(&a.schema), a.constraints.as_ref(), a.config.as_ref()]
        .into_iter()
        .flatten()
    {
        require_file(p)?;
    }
    let rc = RunConfig::load(a.config.as_deref())?;
    let k = a.k.or(rc.k).unwrap_or(5);
    check_k(k)?;
    let ap = ap_config(a.eps, a.max_sweeps, &rc)?;
    let schema = Schema::from_file(&a.schema)?;
    let ds = load_csv(&a.data, &schema)?;
    let projection = match &a.constraints {
        None => None,
        Some(path) => {
            let constraints = parse_constraints(&read(path)?, ds.covariate_names())?;
            let sample = if a.in_fold {
                FitSample::InFold
            } else {
                rc.fit_sample.unwrap_or(FitSample::OffFold)
            };
            Some(ProjectionSpec {
                constraints,
                estimator: rc.estimator.clone().unwrap_or_default(),
                ap,
                sample,
            })
        }
    };
    Ok(Prepared {
        ds,
        k,
        seed: a.seed.or(rc.seed).unwrap_or(0),
        projection,
        rc,
    })
}

fn cmd_dsep(a: &DsepArgs) -> Result<()> {
    require_file(&a.dag)?;
    let g = parse_dag(&read(&a.dag)?)?;
    let given: Vec<&str> = a.given.iter().map(String::as_str).collect();
    let sep = g.d_separated(&a.a, &a.b, &given)?;
    println!("{sep}");
    if let Some(dir) = &a.out_dir {
        write_json(
            &dir.join("summary.json"),
            &json!({ "command": "dsep", "a": a.a, "b": a.b, "given": a.given, "d_separated": sep }),
        )?;
    }
    Ok(())
}

fn cmd_constraints(a: &ConstraintsArgs) -> Result<()> {
    require_file(&a.dag)?;
    let g = parse_dag(&read(&a.dag)?)?;
    let covs: Vec<&str> = a.covariates.iter().map(String::as_str).collect();
    let cs = if a.markov {
        markov_constraints(&g, &covs)?
    } else {
        implied_constraints(&g, &covs, a.max_cond)?
    };
    let text = format_constraints(&cs, &a.covariates);
    match &a.out {
        None => print!("{text}"),
        Some(path) => {
            write(path, &text)?;
            let dir = path.parent().unwrap_or(Path::new("."));
            write_json(
                &dir.join("summary.json"),
                &json!({
                    "command": "constraints",
                    "covariates": a.covariates,
                    "max_cond": a.max_cond,
                    "markov": a.markov,
                    "count": cs.len(),
                    "output": path,
                }),
            )?;
        }
    }
    Ok(())
}

fn cmd_estimate(a: &EstimateArgs) -> Result<()> {
    let p = prepare(&a.common)?;
    let gammas = a
        .gamma
        .clone()
        .or(p.rc.gammas.clone())
        .unwrap_or_else(|| SensConfig::default().gammas);
    let cfg = SensConfig {
        k: p.k,
        seed: p.seed,
        gammas,
        learner: p.rc.learner.clone().unwrap_or_default(),
        trunc: DEFAULT_TRUNC,
    };
    let fit = cross_fit_curve(&p.ds, &cfg, p.projection.as_ref())?;
    let mut csv = String::from("gamma,est,var,ci_lo,ci_hi,projected\n");
    for curve in std::iter::once(&fit.unprojected).chain(fit.projected.as_ref()) {
        for pt in &curve.points {
            let t = &pt.tau;
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                fmt_num(pt.gamma),
                fmt_num(t.estimate),
                fmt_num(t.variance),
                fmt_num(t.ci_lo),
                fmt_num(t.ci_hi),
                curve.projected
            ));
        }
    }
    let out = &a.common.out_dir;
    write(&out.join("curve.csv"), &csv)?;
    write_json(
        &out.join("diagnostics.json"),
        &serde_json::to_value(&fit.diagnostics).expect("diagnostics serialize"),
    )?;
    write_json(
        &out.join("summary.json"),
        &json!({
            "command": "estimate",
            "n": p.ds.n(),
            "k": cfg.k,
            "seed": cfg.seed,
            "constraints": p.projection.as_ref().map(|s| format_constraints(&s.constraints, p.ds.covariate_names())),
            "unprojected": fit.unprojected,
            "projected": fit.projected,
            "nonconverged": fit.nonconverged().len(),
            "outputs": ["curve.csv", "diagnostics.json"],
        }),
    )?;
    Ok(())
}

fn cmd_ovb(a: &OvbArgs) -> Result<()> {
    let p = prepare(&a.common)?;
    let rho = a.rho.or(p.rc.rho).unwrap_or(1.0);
    if !(rho.abs() <= 1.0) {
        return Err(Error::Config(format!("rho must lie in [-1, 1], got {rho}")));
    }
    let eta2s = a
        .eta2
        .clone()
        .or(p.rc.eta2s.clone())
        .unwrap_or_else(|| McConfig::default().eta2s);
    check_eta2(&eta2s)?;
    let cfg = OvbConfig {
        k: p.k,
        seed: p.seed,
        learner: p.rc.learner.clone().unwrap_or_default(),
        trunc: DEFAULT_TRUNC,
    };
    let spec = p
        .projection
        .clone()
        .unwrap_or_else(|| ProjectionSpec::new(Vec::new()));
    let single = a.single_sweep || p.rc.single_sweep.unwrap_or(false);
    let fit = ovb_projected(&p.ds, &cfg, &spec, single, rho, &eta2s)?;
    let mut csv = String::from("eta2,rho,tau_lo,tau_hi,var_lo,var_hi,projected\n");
    let mut sets = vec![&fit.unprojected];
    if p.projection.is_some() {
        sets.push(&fit.projected);
    }
    for set in sets {
        for b in set {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                fmt_num(b.eta2_y),
                fmt_num(b.rho),
                fmt_num(b.tau_lo),
                fmt_num(b.tau_hi),
                fmt_num(b.var_lo),
                fmt_num(b.var_hi),
                b.projected
            ));
        }
    }
    let out = &a.common.out_dir;
    write(&out.join("bounds.csv"), &csv)?;
    write_json(
        &out.join("diagnostics.json"),
        &serde_json::to_value(&fit.diagnostics).expect("diagnostics serialize"),
    )?;
    let short = |f: &crate::ovb::OvbShortFit| {
        json!({ "tau_s": f.tau_s, "sigma2_s": f.sigma2_s, "nu2_s": f.nu2_s })
    };
    write_json(
        &out.join("summary.json"),
        &json!({
            "command": "ovb",
            "n": p.ds.n(),
            "k": cfg.k,
            "seed": cfg.seed,
            "rho": rho,
            "short": short(&fit.short),
            "projected_short": p.projection.as_ref().map(|_| short(&fit.projected_short)),
            "outputs": ["bounds.csv", "diagnostics.json"],
        }),
    )?;
    Ok(())
}

fn cmd_simulate(a: &SimulateArgs, jobs: Option<usize>) -> Result<()> {
    if let Some(c) = &a.config {
        require_file(c)?;
    }
    let rc = RunConfig::load(a.config.as_deref())?;
    let kind = DgpKind::parse(&a.spec)?;
    let format = TableFormat::parse(&a.format)?;
    let mut cfg = McConfig {
        kind,
        jobs,
        ..McConfig::default()
    };
    if kind == DgpKind::Ovb {
        cfg.n = 500;
    }
    cfg.n = a.n.or(rc.n).unwrap_or(cfg.n);
    cfg.reps = a.reps.or(rc.reps).unwrap_or(cfg.reps);
    cfg.seed = a.seed.or(rc.seed).unwrap_or(cfg.seed);
    cfg.k = a.k.or(rc.k).unwrap_or(cfg.k);
    check_k(cfg.k)?;
    if let Some(g) = a.gamma.clone().or(rc.gammas.clone()) {
        cfg.gammas = g;
    }
    if let Some(e) = a.eta2.clone().or(rc.eta2s.clone()) {
        cfg.eta2s = e;
    }
    if kind == DgpKind::Ovb {
        check_eta2(&cfg.eta2s)?;
    }
    cfg.rho = rc.rho.unwrap_or(cfg.rho);
    cfg.ovb_single_sweep = rc.single_sweep.unwrap_or(cfg.ovb_single_sweep);
    cfg.ap = ap_config(a.eps, a.max_sweeps, &rc)?;
    if let Some(s) = rc.fit_sample {
        cfg.sample = s;
    }
    if let Some(l) = rc.learner {
        cfg.learner = l;
    }
    if let Some(e) = rc.estimator {
        cfg.estimator = e;
    }
    if cfg.n < 10 {
        return Err(Error::Config(format!("n must be >= 10, got {}", cfg.n)));
    }
    if cfg.reps == 0 {
        return Err(Error::Config("reps must be >= 1".into()));
    }

    let report = run_mc(&cfg)?;
    eprintln!(
        "{} replications ({} failed) in {:.1}s",
        report.reps_ok + report.failures,
        report.failures,
        report.wall_time_secs
    );
    let ext = match format {
        TableFormat::Csv => "csv",
        TableFormat::Markdown => "md",
    };
    let table_name = format!("{}_table.{ext}", kind.name());
    write(&a.out_dir.join(&table_name), &emit_table(&report, format)?)?;
    let mut summary = serde_json::to_value(&report).expect("report serializes");
    summary["command"] = json!("simulate");
    summary["outputs"] = json!([table_name]);
    write_json(&a.out_dir.join("summary.json"), &summary)?;
    if report.invalid {
        return Err(Error::Estimation(format!(
            "{} of {} replications failed",
            report.failures, cfg.reps
        )));
    }
    Ok(())
}

/// Exit code for an error: 2 for bad input or configuration, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Schema(_)
        | Error::Parse { .. }
        | Error::Syntax { .. }
        | Error::Io { .. }
        | Error::UnknownVertex(_)
        | Error::Cycle(_)
        | Error::Domain { .. }
        | Error::InvalidArgument(_) => 2,
        _ => 1,
    }
}

struct StderrLogger;

impl log::Log for StderrLogger {
    fn enabled(&self, m: &log::Metadata) -> bool {
        m.level() <= log::Level::Warn
    }

    fn log(&self, r: &log::Record) {
        if self.enabled(r.metadata()) {
            eprintln!("{}: {}", r.level().as_str().to_lowercase(), r.args());
        }
    }

    fn flush(&self) {}
}

static LOGGER: StderrLogger = StderrLogger;

/// Parse `args` (including the program name), run the subcommand, and return
/// the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    if log::set_logger(&LOGGER).is_ok() {
        log::set_max_level(log::LevelFilter::Warn);
    }
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if cli.jobs == Some(0) {
        eprintln!("error: --jobs must be >= 1");
        return 2;
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.jobs {
        builder = builder.num_threads(j);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return 2;
        }
    };
    let result = pool.install(|| match &cli.command {
        Command::Dsep(a) => cmd_dsep(a),
        Command::Constraints(a) => cmd_constraints(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Ovb(a) => cmd_ovb(a),
        Command::Simulate(a) => cmd_simulate(a, cli.jobs),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
