//! Twin-experiment driver for model-forest ensemble Kalman filters: TOML
//! experiment descriptions, nature runs, forest construction, sweeps over
//! ensemble size and inflation, and CSV summaries.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod experiment;
pub mod setup;
pub mod sweep;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
pub use experiment::{rmse, run_seed, run_twin_experiment, RunResult};
pub use setup::{generate_snapshots, Setup};
pub use sweep::{run_config, run_config_to, run_sweep, write_csv, CellSummary};
