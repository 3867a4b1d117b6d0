//! Goal-driven Bayesian experimental design: amortized variational posteriors
//! feeding robust convex decision layers, with nested Monte Carlo EIG as the
//! information-theoretic baseline.

pub mod amortizer;
pub mod autodiff;
pub mod checks;
pub mod decision;
pub mod design;
pub mod error;
pub mod io;
pub mod models;
pub mod prob;

pub use error::{Error, Result};
