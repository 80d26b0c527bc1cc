//! Experiment driver for `crn-core`: attempt counts, success-rate grids,
//! file-transfer overhead and Markov sweeps, with CSV/JSON reports.

pub mod config;
pub mod experiments;
pub mod report;

pub use config::{BlockedSource, Experiment, ExperimentConfig, FileSpec, MarkovGrid};
pub use experiments::{
    attempt_row, markov_grid, overhead_calculator, run, run_attempts, run_markov, run_success_rate,
    run_transfer, success_grid, transfer_summary, AttemptRow, MarkovCell, SuccessRow,
    TransferSummary,
};
pub use report::{Cell, Format, Report};
