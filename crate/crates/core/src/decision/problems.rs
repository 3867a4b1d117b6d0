use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::models::pk::{pk_auc_grad, pk_cmax_grad, pk_exposure, PkParams};

use super::DecisionProblem;

/// Quarantine controls `(g_a, g_s)` that keep the linearized infected block
/// stable with margin `α` at minimal economic cost `z_a/(1−g_a) + z_s/(1−g_s)`.
///
/// θ = (β_a, β_s, γ_a, γ_s).
#[derive(Debug, Clone, PartialEq)]
pub struct QuarantineProblem {
    pub z_a: f64,
    pub z_s: f64,
    pub alpha: f64,
    pub eps_rate: f64,
    pub s0_frac: f64,
    pub delta_box: f64,
}

impl QuarantineProblem {
    pub fn new(z_a: f64, z_s: f64, alpha: f64, eps_rate: f64, s0_frac: f64) -> Result<Self> {
        let p = Self { z_a, z_s, alpha, eps_rate, s0_frac, delta_box: 1e-3 };
        if !(z_a > 0.0 && z_s > 0.0 && alpha > 0.0 && eps_rate > 0.0 && s0_frac > 0.0 && s0_frac <= 1.0) {
            return Err(Error::InvalidArgument(format!("invalid quarantine problem {p:?}")));
        }
        Ok(p)
    }

    pub fn standard(eps_rate: f64, s0_frac: f64) -> Result<Self> {
        Self::new(0.4, 0.6, 0.05, eps_rate, s0_frac)
    }

    /// Matrix entries `(A, b, ε, D)` of the infected block under controls `g`.
    fn entries(&self, g: &[f64], theta: &[f64]) -> (f64, f64, f64, f64) {
        let a = theta[0] * self.s0_frac - self.eps_rate - theta[2] - g[0];
        let b = theta[1] * self.s0_frac;
        let d = -theta[3] - g[1];
        (a, b, self.eps_rate, d)
    }

    /// Largest eigenvalue of the infected block in closed form.
    pub fn lambda_max(&self, g: &[f64], theta: &[f64]) -> f64 {
        let (a, b, e, d) = self.entries(g, theta);
        let u = 0.5 * (a - d);
        0.5 * (a + d) + (u * u + b * e).sqrt()
    }
}

impl DecisionProblem for QuarantineProblem {
    fn dim(&self) -> usize {
        2
    }

    fn theta_dim(&self) -> usize {
        4
    }

    fn num_constraints(&self) -> usize {
        1
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0; 2], vec![1.0 - self.delta_box; 2])
    }

    fn cost(&self, g: &[f64], grad: &mut [f64]) -> f64 {
        let (ra, rs) = (1.0 - g[0], 1.0 - g[1]);
        grad[0] = self.z_a / (ra * ra);
        grad[1] = self.z_s / (rs * rs);
        self.z_a / ra + self.z_s / rs
    }

    fn add_cost_hessian(&self, g: &[f64], w: f64, h: &mut DMatrix<f64>) {
        h[(0, 0)] += w * 2.0 * self.z_a / (1.0 - g[0]).powi(3);
        h[(1, 1)] += w * 2.0 * self.z_s / (1.0 - g[1]).powi(3);
    }

    fn constraint(&self, _j: usize, g: &[f64], theta: &[f64], grad_g: &mut [f64]) -> f64 {
        let (a, b, e, d) = self.entries(g, theta);
        let u = 0.5 * (a - d);
        let r = (u * u + b * e).sqrt();
        let dl_da = 0.5 + 0.5 * u / r;
        let dl_dd = 0.5 - 0.5 * u / r;
        grad_g[0] = -dl_da;
        grad_g[1] = -dl_dd;
        0.5 * (a + d) + r + self.alpha
    }

    fn add_constraint_hessian(&self, _j: usize, g: &[f64], theta: &[f64], w: f64, h: &mut DMatrix<f64>) {
        let (a, b, e, d) = self.entries(g, theta);
        let u = 0.5 * (a - d);
        let r = (u * u + b * e).sqrt();
        let k = w * 0.25 * b * e / (r * r * r);
        h[(0, 0)] += k;
        h[(1, 1)] += k;
        h[(0, 1)] -= k;
        h[(1, 0)] -= k;
    }

    fn constraint_grad_theta(&self, _j: usize, g: &[f64], theta: &[f64]) -> Vec<f64> {
        let (a, b, e, d) = self.entries(g, theta);
        let u = 0.5 * (a - d);
        let r = (u * u + b * e).sqrt();
        let dl_da = 0.5 + 0.5 * u / r;
        let dl_dd = 0.5 - 0.5 * u / r;
        let dl_db = 0.5 * e / r;
        vec![self.s0_frac * dl_da, self.s0_frac * dl_db, -dl_da, -dl_dd]
    }
}

/// Smallest dose fraction `g ∈ [0, 1]` keeping `C_max` below `C_thresh` and the
/// AUC above `AUC_min` for a dose `g·D₀`. Constraints are normalized by their
/// thresholds. θ = (k_a, k_e, V).
#[derive(Debug, Clone, PartialEq)]
pub struct DoseProblem {
    pub cost_slope: f64,
    pub dose_ref: f64,
    pub c_thresh: f64,
    pub auc_min: f64,
}

impl DoseProblem {
    pub fn new(cost_slope: f64, dose_ref: f64, c_thresh: f64, auc_min: f64) -> Result<Self> {
        let p = Self { cost_slope, dose_ref, c_thresh, auc_min };
        if !(cost_slope > 0.0 && dose_ref > 0.0 && c_thresh > 0.0 && auc_min > 0.0) {
            return Err(Error::InvalidArgument(format!("invalid dose problem {p:?}")));
        }
        Ok(p)
    }

    fn params(theta: &[f64]) -> PkParams {
        PkParams { k_a: theta[0], k_e: theta[1], v: theta[2] }
    }
}

impl DecisionProblem for DoseProblem {
    fn dim(&self) -> usize {
        1
    }

    fn theta_dim(&self) -> usize {
        3
    }

    fn num_constraints(&self) -> usize {
        2
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0], vec![1.0])
    }

    fn cost(&self, _g: &[f64], grad: &mut [f64]) -> f64 {
        grad[0] = self.cost_slope;
        self.cost_slope * _g[0]
    }

    fn constraint(&self, j: usize, g: &[f64], theta: &[f64], grad_g: &mut [f64]) -> f64 {
        let e = pk_exposure(&Self::params(theta), self.dose_ref);
        if j == 0 {
            grad_g[0] = e.c_max / self.c_thresh;
            g[0] * e.c_max / self.c_thresh - 1.0
        } else {
            grad_g[0] = -e.auc / self.auc_min;
            1.0 - g[0] * e.auc / self.auc_min
        }
    }

    fn constraint_grad_theta(&self, j: usize, g: &[f64], theta: &[f64]) -> Vec<f64> {
        let p = Self::params(theta);
        if j == 0 {
            pk_cmax_grad(&p, self.dose_ref).iter().map(|d| g[0] * d / self.c_thresh).collect()
        } else {
            pk_auc_grad(&p, self.dose_ref).iter().map(|d| -g[0] * d / self.auc_min).collect()
        }
    }
}

/// Threshold decision whose constraint sees θ only through `aᵀθ`:
/// `min g` s.t. `aᵀθ − g ≤ 0`, `g ∈ [lo, hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearThresholdProblem {
    pub a: Vec<f64>,
    pub lo: f64,
    pub hi: f64,
}

impl DecisionProblem for LinearThresholdProblem {
    fn dim(&self) -> usize {
        1
    }

    fn theta_dim(&self) -> usize {
        self.a.len()
    }

    fn num_constraints(&self) -> usize {
        1
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![self.lo], vec![self.hi])
    }

    fn cost(&self, g: &[f64], grad: &mut [f64]) -> f64 {
        grad[0] = 1.0;
        g[0]
    }

    fn constraint(&self, _j: usize, g: &[f64], theta: &[f64], grad_g: &mut [f64]) -> f64 {
        grad_g[0] = -1.0;
        self.a.iter().zip(theta).map(|(a, t)| a * t).sum::<f64>() - g[0]
    }

    fn constraint_grad_theta(&self, _j: usize, _g: &[f64], _theta: &[f64]) -> Vec<f64> {
        self.a.clone()
    }
}
