use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use super::{ForwardModel, ModelKind};
use crate::error::{Error, Result};
use crate::prob::{gaussian_logpdf, DiagNormal, Family};

/// Scalar linear-Gaussian experiment `y = ξθ + n`, `θ ~ N(0, σ_θ²)`,
/// `n ~ N(0, σ_n²)`. Evidence, posterior and EIG are available in closed form,
/// which makes it the reference problem for the Monte Carlo estimators.
#[derive(Debug, Clone)]
pub struct LinearGaussian {
    pub sigma_theta: f64,
    pub sigma_n: f64,
    pub grid: Vec<f64>,
    prior: Family,
}

impl LinearGaussian {
    pub fn new(sigma_theta: f64, sigma_n: f64, grid: Vec<f64>) -> Result<Self> {
        if grid.is_empty() {
            return Err(Error::InvalidArgument("linear-Gaussian grid is empty".into()));
        }
        let prior = Family::Normal(DiagNormal::new(vec![0.0], vec![sigma_theta])?);
        if !(sigma_n > 0.0) {
            return Err(Error::InvalidArgument("noise scale must be positive".into()));
        }
        Ok(Self { sigma_theta, sigma_n, grid, prior })
    }

    pub fn standard() -> Self {
        Self::new(1.0, 1.0, vec![0.0, 0.5, 1.0, 2.0]).expect("valid constants")
    }

    /// `½ ln(1 + ξ² σ_θ² / σ_n²)`.
    pub fn eig(&self, xi: f64) -> f64 {
        0.5 * (1.0 + xi * xi * self.sigma_theta.powi(2) / self.sigma_n.powi(2)).ln()
    }

    /// `ln p(y | ξ)`.
    pub fn log_evidence(&self, y: f64, xi: f64) -> f64 {
        let sd = (xi * xi * self.sigma_theta.powi(2) + self.sigma_n.powi(2)).sqrt();
        gaussian_logpdf(&[y], &[0.0], &[sd]).expect("positive scale")
    }

    /// Posterior mean and standard deviation of `θ`.
    pub fn posterior(&self, y: f64, xi: f64) -> (f64, f64) {
        let prec = 1.0 / self.sigma_theta.powi(2) + xi * xi / self.sigma_n.powi(2);
        ((xi * y / self.sigma_n.powi(2)) / prec, prec.sqrt().recip())
    }
}

impl ForwardModel for LinearGaussian {
    fn kind(&self) -> ModelKind {
        ModelKind::LinearGaussian
    }

    fn prior(&self) -> &Family {
        &self.prior
    }

    fn obs_dim(&self) -> usize {
        1
    }

    fn design_dim(&self) -> usize {
        1
    }

    fn design_grid(&self) -> Vec<Vec<f64>> {
        self.grid.iter().map(|x| vec![*x]).collect()
    }

    fn design_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let lo = self.grid.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (vec![lo], vec![if hi > lo { hi } else { lo + 1.0 }])
    }

    fn simulate(&self, theta: &[f64], xi: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let z: f64 = StandardNormal.sample(rng);
        Ok(vec![xi[0] * theta[0] + self.sigma_n * z])
    }

    fn loglik(&self, y: &[f64], theta: &[f64], xi: &[f64]) -> Result<f64> {
        gaussian_logpdf(&y[..1], &[xi[0] * theta[0]], &[self.sigma_n])
    }

    fn loglik_grad(&self, y: &[f64], theta: &[f64], xi: &[f64]) -> Result<(f64, Vec<f64>)> {
        let r = (y[0] - xi[0] * theta[0]) / self.sigma_n.powi(2);
        Ok((self.loglik(y, theta, xi)?, vec![r * xi[0]]))
    }

    fn score_dxi(&self, y: &[f64], theta: &[f64], xi: &[f64]) -> Result<Vec<f64>> {
        let r = (y[0] - xi[0] * theta[0]) / self.sigma_n.powi(2);
        Ok(vec![r * theta[0]])
    }
}
