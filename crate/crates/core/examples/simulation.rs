//! A small Monte Carlo run of the second simulation design, printed as a
//! markdown table.

use sensproj::mc::{emit_table, run_mc, DgpKind, McConfig, TableFormat};

fn main() -> sensproj::Result<()> {
    let mut cfg = McConfig::new(DgpKind::Example2, 500, 10, 1);
    cfg.gammas = vec![-4.0, 0.0, 4.0];
    let report = run_mc(&cfg)?;
    print!("{}", emit_table(&report, TableFormat::Markdown)?);
    eprintln!(
        "{} replications ok, {} failed, {:.1}s",
        report.reps_ok, report.failures, report.wall_time_secs
    );
    Ok(())
}
