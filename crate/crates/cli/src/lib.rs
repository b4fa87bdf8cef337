//! Reproducible experiments on top of `evkf-core`: simulate datasets, run filters, compare
//! ledgers and report variational gaps.

pub mod commands;
pub mod config;
pub mod error;
pub mod run;

pub use commands::{cmd_bounds, cmd_compare, cmd_filter, cmd_simulate, BoundsSummary, Checkpoint, Ledger};
pub use config::{FilterChoice, Learner, Overrides, RunConfig};
pub use error::{HarnessError, Result};
