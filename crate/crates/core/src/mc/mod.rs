//! Simulation designs and the Monte Carlo harness.

mod dgp;
mod run;

pub use dgp::{covariate_names, generate, DgpKind, DgpSpec, Truth};
pub use run::{
    emit_table, run_mc, McConfig, McReport, McRow, TableFormat, Variant, MAX_FAILURE_SHARE,
    TABLE_COLUMNS,
};
