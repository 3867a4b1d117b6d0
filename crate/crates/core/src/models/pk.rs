use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use super::{ForwardModel, ModelKind};
use crate::error::{Error, Result};
use crate::prob::{gaussian_logpdf, DiagLogNormal, Family, RandomStream};

/// Below this gap between `k_a` and `k_e` the Bateman function uses its confluent limit.
pub const CONFLUENT_TOL: f64 = 1e-8;

/// Seed of the fixed prior sample used to calibrate exposure thresholds.
const CALIBRATION_SEED: u64 = 0x5eed_0b0e;

#[derive(Debug, Clone, PartialEq)]
pub struct PkConfig {
    /// Reference dose; the administered dose is `g · dose_ref`.
    pub dose_ref: f64,
    /// Dose given in the observation experiment.
    pub dose_obs: f64,
    pub sigma_mult: f64,
    pub sigma_add: f64,
    pub horizon: f64,
    pub grid: Vec<f64>,
    pub prior_mu: Vec<f64>,
    pub prior_sigma: Vec<f64>,
}

impl Default for PkConfig {
    fn default() -> Self {
        Self {
            dose_ref: 400.0,
            dose_obs: 400.0,
            sigma_mult: 0.1,
            sigma_add: 0.1,
            horizon: 24.0,
            grid: (1..=24).map(f64::from).collect(),
            prior_mu: vec![0.0, 0.1f64.ln(), 20.0f64.ln()],
            prior_sigma: vec![0.2; 3],
        }
    }
}

impl PkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dose_ref > 0.0 && self.dose_obs >= 0.0 && self.sigma_mult > 0.0 && self.sigma_add > 0.0) {
            return Err(Error::InvalidArgument("pk doses and noise scales must be positive".into()));
        }
        if !(self.horizon > 1.0) || self.grid.is_empty() || self.grid.iter().any(|&t| t < 1.0 || t > self.horizon) {
            return Err(Error::InvalidArgument("pk grid must be nonempty and inside [1, horizon]".into()));
        }
        if self.prior_mu.len() != 3 || self.prior_sigma.len() != 3 {
            return Err(Error::InvalidArgument("pk prior has three coordinates".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PkParams {
    pub k_a: f64,
    pub k_e: f64,
    pub v: f64,
}

impl PkParams {
    pub fn new(k_a: f64, k_e: f64, v: f64) -> Result<Self> {
        if !([k_a, k_e, v].iter().all(|x| *x > 0.0 && x.is_finite())) {
            return Err(Error::InvalidArgument(format!("PK parameters must be positive, got ({k_a}, {k_e}, {v})")));
        }
        Ok(Self { k_a, k_e, v })
    }

    pub fn from_theta(theta: &[f64]) -> Result<Self> {
        match theta {
            [a, e, v] => Self::new(*a, *e, *v),
            _ => Err(Error::InvalidArgument(format!("PK θ has 3 entries, got {}", theta.len()))),
        }
    }

    fn confluent(&self) -> bool {
        (self.k_a - self.k_e).abs() < CONFLUENT_TOL
    }
}

/// Noiseless Bateman concentration.
pub fn pk_concentration(p: &PkParams, dose: f64, t: f64) -> f64 {
    if p.confluent() {
        return dose * p.k_a * t / p.v * (-p.k_a * t).exp();
    }
    dose * p.k_a / (p.v * (p.k_a - p.k_e)) * ((-p.k_e * t).exp() - (-p.k_a * t).exp())
}

/// Concentration with its gradient in `(k_a, k_e, V)` and its time derivative.
pub fn pk_concentration_derivs(p: &PkParams, dose: f64, t: f64) -> (f64, [f64; 3], f64) {
    let (ka, ke, v) = (p.k_a, p.k_e, p.v);
    if p.confluent() {
        let e = (-ka * t).exp();
        let m = dose * ka * t / v * e;
        let d_ka = dose / v * e * t * (1.0 - ka * t / 2.0);
        let d_ke = -dose * ka / v * e * t * t / 2.0;
        let d_t = dose * ka / v * e * (1.0 - ka * t);
        return (m, [d_ka, d_ke, -m / v], d_t);
    }
    let diff = ka - ke;
    let amp = dose * ka / (v * diff);
    let (ee, ea) = ((-ke * t).exp(), (-ka * t).exp());
    let m = amp * (ee - ea);
    let d_amp_ka = -dose * ke / (v * diff * diff);
    let d_amp_ke = dose * ka / (v * diff * diff);
    let d_ka = d_amp_ka * (ee - ea) + amp * t * ea;
    let d_ke = d_amp_ke * (ee - ea) - amp * t * ee;
    let d_t = amp * (ka * ea - ke * ee);
    (m, [d_ka, d_ke, -m / v], d_t)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Exposure {
    pub t_max: f64,
    pub c_max: f64,
    pub auc: f64,
}

/// Peak time, peak concentration and total exposure of a single dose.
pub fn pk_exposure(p: &PkParams, dose: f64) -> Exposure {
    let auc = dose / (p.v * p.k_e);
    if p.confluent() {
        return Exposure { t_max: 1.0 / p.k_a, c_max: dose / (p.v * std::f64::consts::E), auc };
    }
    let diff = p.k_a - p.k_e;
    let t_max = (p.k_a / p.k_e).ln() / diff;
    let c_max = dose / p.v * (p.k_e / p.k_a).powf(p.k_e / diff);
    Exposure { t_max, c_max, auc }
}

/// Gradient of `C_max` in `(k_a, k_e, V)`.
pub fn pk_cmax_grad(p: &PkParams, dose: f64) -> [f64; 3] {
    let c = pk_exposure(p, dose).c_max;
    if p.confluent() {
        // ln C_max ≈ ln(D/V) − 1 + (k_a − k_e)/(2k) near the diagonal.
        let k = p.k_a;
        return [c / (2.0 * k), -c / (2.0 * k), -c / p.v];
    }
    let (ka, ke) = (p.k_a, p.k_e);
    let diff = ka - ke;
    let r = (ke / ka).ln();
    // ln C_max = ln D − ln V + ke·r/diff
    let dl_dka = ke / diff * (-1.0 / ka) - ke * r / (diff * diff);
    let dl_dke = r / diff + ke / diff * (1.0 / ke) + ke * r / (diff * diff);
    [c * dl_dka, c * dl_dke, -c / p.v]
}

/// Gradient of the AUC in `(k_a, k_e, V)`.
pub fn pk_auc_grad(p: &PkParams, dose: f64) -> [f64; 3] {
    let auc = dose / (p.v * p.k_e);
    [0.0, -auc / p.k_e, -auc / p.v]
}

#[derive(Debug, Clone)]
pub struct PkModel {
    pub cfg: PkConfig,
    prior: Family,
}

impl PkModel {
    pub fn new(cfg: PkConfig) -> Result<Self> {
        cfg.validate()?;
        let prior = Family::LogNormal(DiagLogNormal::new(cfg.prior_mu.clone(), cfg.prior_sigma.clone())?);
        Ok(Self { cfg, prior })
    }

    fn check_xi(&self, xi: &[f64]) -> Result<f64> {
        match xi {
            [t] if *t >= 0.0 && t.is_finite() => Ok(*t),
            _ => Err(Error::InvalidArgument(format!("PK design must be one nonnegative time, got {xi:?}"))),
        }
    }

    fn obs_sd(&self, m: f64) -> f64 {
        (self.cfg.sigma_mult.powi(2) * m * m + self.cfg.sigma_add.powi(2)).sqrt()
    }

    /// `∂ log N(y; m, v(m)) / ∂m` with `v = σ_mult² m² + σ_add²`.
    fn dll_dm(&self, y: f64, m: f64) -> f64 {
        let var = self.cfg.sigma_mult.powi(2) * m * m + self.cfg.sigma_add.powi(2);
        let r = y - m;
        let dll_dvar = -0.5 / var + 0.5 * r * r / (var * var);
        r / var + dll_dvar * 2.0 * self.cfg.sigma_mult.powi(2) * m
    }

    /// `(C_thresh, AUC_min)` as the 80th percentile of `C_max` and the 20th
    /// percentile of the AUC over `n` prior draws at dose fraction `g`.
    pub fn calibrate_thresholds(&self, n: usize, g: f64) -> Result<(f64, f64)> {
        if n == 0 {
            return Err(Error::InvalidArgument("calibration needs at least one draw".into()));
        }
        let mut rng = RandomStream::new(CALIBRATION_SEED).rng();
        let dose = g * self.cfg.dose_ref;
        let mut cmax = Vec::with_capacity(n);
        let mut auc = Vec::with_capacity(n);
        for _ in 0..n {
            let p = PkParams::from_theta(&self.prior.sample(&mut rng))?;
            let e = pk_exposure(&p, dose);
            cmax.push(e.c_max);
            auc.push(e.auc);
        }
        Ok((quantile(&mut cmax, 0.8), quantile(&mut auc, 0.2)))
    }
}

/// Linear-interpolation sample quantile.
pub fn quantile(xs: &mut [f64], q: f64) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let pos = q * (xs.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    xs[lo] + (pos - lo as f64) * (xs[hi] - xs[lo])
}

impl ForwardModel for PkModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Pk
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
        self.cfg.grid.iter().map(|t| vec![*t]).collect()
    }

    fn design_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![1.0], vec![self.cfg.horizon])
    }

    fn simulate(&self, theta: &[f64], xi: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let t = self.check_xi(xi)?;
        let m = pk_concentration(&PkParams::from_theta(theta)?, self.cfg.dose_obs, t);
        let e_mult: f64 = StandardNormal.sample(rng);
        let e_add: f64 = StandardNormal.sample(rng);
        Ok(vec![m * (1.0 + self.cfg.sigma_mult * e_mult) + self.cfg.sigma_add * e_add])
    }

    fn loglik(&self, y: &[f64], theta: &[f64], xi: &[f64]) -> Result<f64> {
        let t = self.check_xi(xi)?;
        let m = pk_concentration(&PkParams::from_theta(theta)?, self.cfg.dose_obs, t);
        gaussian_logpdf(&y[..1], &[m], &[self.obs_sd(m)])
    }

    fn loglik_grad(&self, y: &[f64], theta: &[f64], xi: &[f64]) -> Result<(f64, Vec<f64>)> {
        let t = self.check_xi(xi)?;
        let (m, dm, _) = pk_concentration_derivs(&PkParams::from_theta(theta)?, self.cfg.dose_obs, t);
        let ll = gaussian_logpdf(&y[..1], &[m], &[self.obs_sd(m)])?;
        let s = self.dll_dm(y[0], m);
        Ok((ll, dm.iter().map(|d| s * d).collect()))
    }

    fn score_dxi(&self, y: &[f64], theta: &[f64], xi: &[f64]) -> Result<Vec<f64>> {
        let t = self.check_xi(xi)?;
        let (m, _, dt) = pk_concentration_derivs(&PkParams::from_theta(theta)?, self.cfg.dose_obs, t);
        Ok(vec![self.dll_dm(y[0], m) * dt])
    }
}
