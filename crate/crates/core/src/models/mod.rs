//! Benchmark systems: source localization, SIQR epidemic and Bateman PK.

pub mod pk;
pub mod siqr;
pub mod srcloc;
pub mod toy;

use std::fmt;
use std::str::FromStr;

use rand::RngCore;

use crate::error::{Error, Result};
use crate::prob::Family;

pub use pk::{PkConfig, PkModel, PkParams};
pub use siqr::{SiqrConfig, SiqrModel, SiqrParams, SiqrState, Trajectory};
pub use srcloc::{SrcLocConfig, SrcLocModel};
pub use toy::LinearGaussian;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    SrcLoc,
    Siqr,
    Pk,
    LinearGaussian,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::SrcLoc => "srcloc",
            ModelKind::Siqr => "siqr",
            ModelKind::Pk => "pk",
            ModelKind::LinearGaussian => "linear-gaussian",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "srcloc" => Ok(ModelKind::SrcLoc),
            "siqr" => Ok(ModelKind::Siqr),
            "pk" => Ok(ModelKind::Pk),
            "linear-gaussian" => Ok(ModelKind::LinearGaussian),
            other => Err(Error::InvalidArgument(format!("unknown model `{other}`"))),
        }
    }
}

/// Simulator plus likelihood of one benchmark.
///
/// `score_dxi` is the design derivative of the conditional log-likelihood
/// `∂/∂ξ log p(y | θ, ξ)`, evaluated at the parameter that generated `y`.
pub trait ForwardModel: Send + Sync {
    fn kind(&self) -> ModelKind;
    fn prior(&self) -> &Family;
    fn obs_dim(&self) -> usize;
    fn design_dim(&self) -> usize;
    fn design_grid(&self) -> Vec<Vec<f64>>;
    /// Box of admissible designs used by the search and by input scaling.
    fn design_bounds(&self) -> (Vec<f64>, Vec<f64>);
    fn simulate(&self, theta: &[f64], xi: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>>;
    fn loglik(&self, y: &[f64], theta: &[f64], xi: &[f64]) -> Result<f64>;
    /// Log-likelihood and its gradient in `θ`.
    fn loglik_grad(&self, y: &[f64], theta: &[f64], xi: &[f64]) -> Result<(f64, Vec<f64>)>;
    fn score_dxi(&self, y: &[f64], theta: &[f64], xi: &[f64]) -> Result<Vec<f64>>;

    /// Transform applied to observations before affine standardization.
    fn obs_features(&self, y: &[f64]) -> Vec<f64> {
        y.to_vec()
    }

    fn theta_dim(&self) -> usize {
        self.prior().dim()
    }

    /// Design rescaled to the unit box.
    fn design_features(&self, xi: &[f64]) -> Vec<f64> {
        let (lo, hi) = self.design_bounds();
        xi.iter()
            .zip(lo.iter().zip(&hi))
            .map(|(x, (l, h))| (x - l) / (h - l))
            .collect()
    }

    /// Derivative of each design feature with respect to its design coordinate.
    fn design_feature_scale(&self) -> Vec<f64> {
        let (lo, hi) = self.design_bounds();
        lo.iter().zip(&hi).map(|(l, h)| 1.0 / (h - l)).collect()
    }
}

/// Builds the model named by `kind` with default constants.
pub fn default_model(kind: ModelKind) -> Result<Box<dyn ForwardModel>> {
    Ok(match kind {
        ModelKind::SrcLoc => Box::new(SrcLocModel::new(SrcLocConfig::default())?),
        ModelKind::Siqr => Box::new(SiqrModel::new(SiqrConfig::default())?),
        ModelKind::Pk => Box::new(PkModel::new(PkConfig::default())?),
        ModelKind::LinearGaussian => Box::new(LinearGaussian::standard()),
    })
}
