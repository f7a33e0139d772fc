//! Sensitivity analysis for unmeasured confounding with variance reduction
//! from conditional-independence structure among covariates.
//!
//! Debiased estimators of the treatment effect under a logistic tilt of the
//! outcome distribution are combined with projections of their influence
//! functions onto the tangent space implied by a causal graph.

pub mod cli;
pub mod dataio;
pub mod error;
pub mod graphs;
pub mod learners;
pub mod mc;
pub mod ovb;
pub mod project;
pub mod sens;
pub mod stats;

pub use error::{Error, Result};
