//! Configuration, weight files, sweep tables and the command-line driver.

mod cli;
mod config;
mod csv;
mod weights;

pub use cli::{build_model, build_problem, obtain_weights, run_command};
pub use config::{default_train, ExperimentConfig};
pub use csv::{fmt_sig, read_sweep_csv, sweep_csv_string, write_sweep_csv, SWEEP_HEADER};
pub use weights::{fnv1a64, load_weights, save_weights, weights_from_str, weights_to_string};
