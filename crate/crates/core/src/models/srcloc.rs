use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use super::{ForwardModel, ModelKind};
use crate::error::{Error, Result};
use crate::prob::{gaussian_logpdf, DiagNormal, Family};

#[derive(Debug, Clone, PartialEq)]
pub struct SrcLocConfig {
    pub s0: f64,
    pub c_base: f64,
    pub sigma_i: f64,
    pub sigma_phi: f64,
    /// Candidate sensor locations.
    pub grid: Vec<[f64; 2]>,
}

impl Default for SrcLocConfig {
    fn default() -> Self {
        let ticks: Vec<f64> = (0..7).map(|k| -4.0 + 8.0 * k as f64 / 6.0).collect();
        let mut grid = Vec::with_capacity(49);
        for &x in &ticks {
            for &y in &ticks {
                grid.push([x, y]);
            }
        }
        Self { s0: 0.1, c_base: 0.1, sigma_i: 0.5, sigma_phi: 0.1, grid }
    }
}

impl SrcLocConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s0 > 0.0 && self.c_base >= 0.0 && self.sigma_i > 0.0 && self.sigma_phi > 0.0) {
            return Err(Error::InvalidArgument(
                "srcloc requires s0 > 0, c_base >= 0 and positive noise".into(),
            ));
        }
        if self.grid.is_empty() {
            return Err(Error::InvalidArgument("srcloc grid is empty".into()));
        }
        Ok(())
    }
}

/// Noiseless sensor reading `(ln I, cos ψ, sin ψ)` for a source at `theta`
/// and a sensor at `xi`.
pub fn srcloc_forward(theta: &[f64], xi: &[f64], cfg: &SrcLocConfig) -> [f64; 3] {
    let (dx, dy) = (theta[0] - xi[0], theta[1] - xi[1]);
    let r2 = dx * dx + dy * dy;
    let intensity = cfg.c_base + 1.0 / (cfg.s0 + r2);
    let (c, s) = if r2 == 0.0 {
        (1.0, 0.0)
    } else {
        let r = r2.sqrt();
        (dx / r, dy / r)
    };
    [intensity.ln(), c, s]
}

/// Forward map and its Jacobian with respect to `theta` (rows = outputs).
fn forward_jacobian(theta: &[f64], xi: &[f64], cfg: &SrcLocConfig) -> ([f64; 3], [[f64; 2]; 3]) {
    let m = srcloc_forward(theta, xi, cfg);
    let (dx, dy) = (theta[0] - xi[0], theta[1] - xi[1]);
    let r2 = dx * dx + dy * dy;
    let w = 1.0 / (cfg.s0 + r2);
    let intensity = cfg.c_base + w;
    let dlog = -2.0 * w * w / intensity;
    let mut jac = [[dlog * dx, dlog * dy], [0.0; 2], [0.0; 2]];
    if r2 > 0.0 {
        let r3 = r2 * r2.sqrt();
        jac[1] = [dy * dy / r3, -dx * dy / r3];
        jac[2] = [-dx * dy / r3, dx * dx / r3];
    }
    (m, jac)
}

pub fn srcloc_loglik(y: &[f64], theta: &[f64], xi: &[f64], cfg: &SrcLocConfig) -> Result<f64> {
    let m = srcloc_forward(theta, xi, cfg);
    gaussian_logpdf(y, &m, &[cfg.sigma_i, cfg.sigma_phi, cfg.sigma_phi])
}

#[derive(Debug, Clone)]
pub struct SrcLocModel {
    pub cfg: SrcLocConfig,
    prior: Family,
}

impl SrcLocModel {
    pub fn new(cfg: SrcLocConfig) -> Result<Self> {
        cfg.validate()?;
        let prior = Family::Normal(DiagNormal::new(vec![0.0; 2], vec![1.0; 2])?);
        Ok(Self { cfg, prior })
    }

    fn sigmas(&self) -> [f64; 3] {
        [self.cfg.sigma_i, self.cfg.sigma_phi, self.cfg.sigma_phi]
    }

    /// `∂ log p / ∂m` for each output channel.
    fn residual_scores(&self, y: &[f64], m: &[f64; 3]) -> [f64; 3] {
        let s = self.sigmas();
        [0, 1, 2].map(|k| (y[k] - m[k]) / (s[k] * s[k]))
    }
}

impl ForwardModel for SrcLocModel {
    fn kind(&self) -> ModelKind {
        ModelKind::SrcLoc
    }

    fn prior(&self) -> &Family {
        &self.prior
    }

    fn obs_dim(&self) -> usize {
        3
    }

    fn design_dim(&self) -> usize {
        2
    }

    fn design_grid(&self) -> Vec<Vec<f64>> {
        self.cfg.grid.iter().map(|p| p.to_vec()).collect()
    }

    fn design_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![f64::INFINITY; 2];
        let mut hi = vec![f64::NEG_INFINITY; 2];
        for p in &self.cfg.grid {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        for k in 0..2 {
            if hi[k] <= lo[k] {
                hi[k] = lo[k] + 1.0;
            }
        }
        (lo, hi)
    }

    fn simulate(&self, theta: &[f64], xi: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let m = srcloc_forward(theta, xi, &self.cfg);
        let s = self.sigmas();
        Ok((0..3)
            .map(|k| {
                let z: f64 = StandardNormal.sample(rng);
                m[k] + s[k] * z
            })
            .collect())
    }

    fn loglik(&self, y: &[f64], theta: &[f64], xi: &[f64]) -> Result<f64> {
        srcloc_loglik(y, theta, xi, &self.cfg)
    }

    fn loglik_grad(&self, y: &[f64], theta: &[f64], xi: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (m, jac) = forward_jacobian(theta, xi, &self.cfg);
        let ll = gaussian_logpdf(y, &m, &self.sigmas())?;
        let r = self.residual_scores(y, &m);
        let g = (0..2).map(|j| (0..3).map(|k| r[k] * jac[k][j]).sum()).collect();
        Ok((ll, g))
    }

    fn score_dxi(&self, y: &[f64], theta: &[f64], xi: &[f64]) -> Result<Vec<f64>> {
        // The forward map depends on θ − ξ only.
        let (_, g) = self.loglik_grad(y, theta, xi)?;
        Ok(g.into_iter().map(|v| -v).collect())
    }
}
