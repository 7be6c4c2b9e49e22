//! Experiment plumbing: configuration, result files, sweeps and analyses.

pub mod analysis;
pub mod config;
pub mod results;
pub mod sweep;

pub use config::{select_signals, ExperimentConfig};
pub use results::{ResultRow, RunStatus, SummaryRow};
pub use sweep::{run_signal, run_sweep, train_model, Prepared, SweepOutcome, TrainOutcome};
