use rand::RngCore;
use rand_distr::{Distribution, Poisson};

use super::{ForwardModel, ModelKind};
use crate::autodiff::{Dual, Scalar};
use crate::error::{Error, Result};
use crate::prob::{poisson_logpmf, DiagLogNormal, Family};

/// Fraction of true infections that is reported.
pub const REPORTING_RATE: f64 = 0.95;

const STATE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SiqrConfig {
    pub eps_rate: f64,
    pub init: SiqrState,
    pub n_pop: f64,
    pub horizon: f64,
    pub grid: Vec<f64>,
    pub dt: f64,
    /// Step for central differences of the dense trajectory in `ξ`.
    pub h_fd: f64,
    pub prior_mu: Vec<f64>,
    pub prior_sigma: Vec<f64>,
}

impl Default for SiqrConfig {
    fn default() -> Self {
        Self {
            eps_rate: 0.2,
            init: SiqrState { s: 0.98, x_a: 0.01, x_s: 0.01, h: 0.0 },
            n_pop: 1000.0,
            horizon: 100.0,
            grid: (1..=15).map(f64::from).collect(),
            dt: 0.1,
            h_fd: 1e-3,
            prior_mu: vec![0.5, 0.8, 0.2, 0.2],
            prior_sigma: vec![0.5, 0.5, 0.3, 0.3],
        }
    }
}

impl SiqrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_rate > 0.0 && self.n_pop > 0.0 && self.horizon > 0.0 && self.dt > 0.0 && self.h_fd > 0.0) {
            return Err(Error::InvalidArgument("siqr constants must be positive".into()));
        }
        if !(self.init.s > 0.0 && self.init.s <= 1.0) {
            return Err(Error::InvalidArgument("siqr initial susceptible fraction must lie in (0, 1]".into()));
        }
        if self.grid.is_empty() || self.grid.iter().any(|&t| t < 1.0 || t > self.horizon) {
            return Err(Error::InvalidArgument("siqr grid must be nonempty and inside [1, horizon]".into()));
        }
        if self.prior_mu.len() != 4 || self.prior_sigma.len() != 4 {
            return Err(Error::InvalidArgument("siqr prior has four coordinates".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiqrParams {
    pub beta_a: f64,
    pub beta_s: f64,
    pub gamma_a: f64,
    pub gamma_s: f64,
    pub eps_rate: f64,
    pub s0_frac: f64,
}

impl SiqrParams {
    pub fn new(beta_a: f64, beta_s: f64, gamma_a: f64, gamma_s: f64, eps_rate: f64, s0_frac: f64) -> Result<Self> {
        let p = Self { beta_a, beta_s, gamma_a, gamma_s, eps_rate, s0_frac };
        let positive = [beta_a, beta_s, gamma_a, gamma_s, eps_rate].iter().all(|v| *v > 0.0 && v.is_finite());
        if !positive || !(s0_frac > 0.0 && s0_frac <= 1.0) {
            return Err(Error::InvalidArgument(format!("invalid SIQR parameters {p:?}")));
        }
        Ok(p)
    }

    /// Parameters from `θ = (β_a, β_s, γ_a, γ_s)` and the fixed constants.
    pub fn from_theta(theta: &[f64], cfg: &SiqrConfig) -> Result<Self> {
        if theta.len() != 4 {
            return Err(Error::InvalidArgument(format!("SIQR θ has 4 entries, got {}", theta.len())));
        }
        Self::new(theta[0], theta[1], theta[2], theta[3], cfg.eps_rate, cfg.init.s)
    }

    pub fn rates(&self) -> [f64; 4] {
        [self.beta_a, self.beta_s, self.gamma_a, self.gamma_s]
    }

    /// Linearized infected-block matrix at `t₀` under controls `(g_a, g_s)`.
    pub fn system_matrix(&self, g_a: f64, g_s: f64) -> [[f64; 2]; 2] {
        [
            [self.beta_a * self.s0_frac - self.eps_rate - self.gamma_a - g_a, self.beta_s * self.s0_frac],
            [self.eps_rate, -self.gamma_s - g_s],
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiqrState {
    pub s: f64,
    pub x_a: f64,
    pub x_s: f64,
    pub h: f64,
}

impl SiqrState {
    pub fn to_array(self) -> [f64; 4] {
        [self.s, self.x_a, self.x_s, self.h]
    }
}

/// Fixed-step solution with cubic Hermite dense output on `[0, t_end]`, where
/// `t_end` is the requested horizon rounded up to a whole step.
#[derive(Debug, Clone)]
pub struct Trajectory<S> {
    pub dt: f64,
    pub t_end: f64,
    pub states: Vec<[S; 4]>,
    pub derivs: Vec<[S; 4]>,
}

impl<S: Scalar> Trajectory<S> {
    /// Interpolated state at `t ∈ [0, t_end]`.
    pub fn at(&self, t: f64) -> Result<[S; 4]> {
        if !(t >= 0.0 && t <= self.t_end + 1e-12) {
            return Err(Error::InvalidArgument(format!("t = {t} outside [0, {}]", self.t_end)));
        }
        let n = self.states.len() - 1;
        let k = ((t / self.dt).floor() as usize).min(n - 1);
        let u = (t - k as f64 * self.dt) / self.dt;
        let (u2, u3) = (u * u, u * u * u);
        let h00 = 2.0 * u3 - 3.0 * u2 + 1.0;
        let h10 = (u3 - 2.0 * u2 + u) * self.dt;
        let h01 = -2.0 * u3 + 3.0 * u2;
        let h11 = (u3 - u2) * self.dt;
        let (x0, x1, f0, f1) = (&self.states[k], &self.states[k + 1], &self.derivs[k], &self.derivs[k + 1]);
        Ok([0, 1, 2, 3].map(|c| x0[c].scale(h00) + f0[c].scale(h10) + x1[c].scale(h01) + f1[c].scale(h11)))
    }
}

fn rhs<S: Scalar>(rates: &[S; 4], eps: f64, g: (f64, f64), x: &[S; 4]) -> [S; 4] {
    let [ba, bs, ga, gs] = *rates;
    let [s, xa, xs, _] = *x;
    let inf_a = ba * s * xa;
    let inf_s = bs * s * xs;
    let ds = -(inf_a + inf_s);
    let dxa = inf_a + inf_s - xa.scale(eps) - ga * xa - xa.scale(g.0);
    let dxs = xa.scale(eps) - gs * xs - xs.scale(g.1);
    // Recovered and quarantined mass both leave the infected pool for good.
    let dh = ga * xa + gs * xs + xa.scale(g.0) + xs.scale(g.1);
    [ds, dxa, dxs, dh]
}

/// RK4 integration generic over the scalar type, so the same code yields
/// parameter sensitivities when `S` is a dual number.
///
/// The step is reduced below `dt` when the rates are large enough to leave the
/// RK4 stability region.
pub fn integrate_generic<S: Scalar>(
    rates: [S; 4],
    eps: f64,
    controls: (f64, f64),
    init: [f64; 4],
    t_end: f64,
    dt: f64,
) -> Result<Trajectory<S>> {
    if !(t_end > 0.0 && dt > 0.0) {
        return Err(Error::InvalidArgument("t_end and dt must be positive".into()));
    }
    if !(0.0..1.0).contains(&controls.0) || !(0.0..1.0).contains(&controls.1) {
        return Err(Error::InvalidArgument("controls must lie in [0, 1)".into()));
    }
    let rate_bound: f64 = rates.iter().map(|r| r.val().abs()).sum::<f64>() + eps + controls.0 + controls.1;
    let dt_stable = if rate_bound > 0.0 { 1.0 / rate_bound } else { dt };
    // Fixed node spacing independent of `t_end` keeps the dense output smooth in `t_end`.
    let h = dt.min(dt_stable);
    let n = ((t_end / h) - 1e-9).ceil().max(1.0) as usize;

    let mut x = init.map(S::cst);
    let mut states = Vec::with_capacity(n + 1);
    let mut derivs = Vec::with_capacity(n + 1);
    let mut f = rhs(&rates, eps, controls, &x);
    states.push(x);
    derivs.push(f);
    let add = |x: &[S; 4], k: &[S; 4], c: f64| [0, 1, 2, 3].map(|i| x[i] + k[i].scale(c));
    for step in 1..=n {
        let k1 = f;
        let k2 = rhs(&rates, eps, controls, &add(&x, &k1, 0.5 * h));
        let k3 = rhs(&rates, eps, controls, &add(&x, &k2, 0.5 * h));
        let k4 = rhs(&rates, eps, controls, &add(&x, &k3, h));
        x = [0, 1, 2, 3].map(|i| x[i] + (k1[i] + k2[i].scale(2.0) + k3[i].scale(2.0) + k4[i]).scale(h / 6.0));
        if let Some(c) = (0..4).find(|&c| !(x[c].val() >= -STATE_TOL && x[c].val() <= 1.0 + STATE_TOL)) {
            return Err(Error::Integration {
                t: step as f64 * h,
                detail: format!("compartment {c} = {}", x[c].val()),
            });
        }
        f = rhs(&rates, eps, controls, &x);
        states.push(x);
        derivs.push(f);
    }
    Ok(Trajectory { dt: h, t_end: n as f64 * h, states, derivs })
}

pub fn siqr_integrate(
    params: &SiqrParams,
    controls: (f64, f64),
    init: &SiqrState,
    t_end: f64,
    dt: f64,
) -> Result<Trajectory<f64>> {
    integrate_generic(params.rates(), params.eps_rate, controls, init.to_array(), t_end, dt)
}

/// Largest eigenvalue of the 2×2 infected-block matrix with its left and right
/// eigenvectors, normalized to unit length with `v·u > 0`.
pub fn siqr_lambda_max(params: &SiqrParams, g_a: f64, g_s: f64) -> Result<(f64, [f64; 2], [f64; 2])> {
    lambda_max_2x2(params.system_matrix(g_a, g_s))
}

/// Dominant eigenpair of a real 2×2 matrix with nonnegative off-diagonal product.
pub fn lambda_max_2x2(m: [[f64; 2]; 2]) -> Result<(f64, [f64; 2], [f64; 2])> {
    let ([a, b], [c, d]) = (m[0], m[1]);
    let half = 0.5 * (a - d);
    let disc = half * half + b * c;
    if !(disc >= 0.0) {
        return Err(Error::Numerical(format!("complex eigenvalues, discriminant {disc}")));
    }
    let lambda = 0.5 * (a + d) + disc.sqrt();
    let pick = |p: [f64; 2], q: [f64; 2], fallback: [f64; 2]| -> [f64; 2] {
        let (np, nq) = (p[0].hypot(p[1]), q[0].hypot(q[1]));
        let (v, n) = if np >= nq { (p, np) } else { (q, nq) };
        if n <= 1e-300 {
            fallback
        } else {
            [v[0] / n, v[1] / n]
        }
    };
    let axis = if a >= d { [1.0, 0.0] } else { [0.0, 1.0] };
    let u = pick([b, lambda - a], [lambda - d, c], axis);
    let mut v = pick([c, lambda - a], [lambda - d, b], axis);
    if v[0] * u[0] + v[1] * u[1] < 0.0 {
        v = [-v[0], -v[1]];
    }
    Ok((lambda, v, u))
}

/// Noiseless counts `N_pop · (x_a(ξ), x_s(ξ))` under zero controls.
pub fn siqr_true_counts(params: &SiqrParams, xi: f64, cfg: &SiqrConfig) -> Result<[f64; 2]> {
    let traj = siqr_integrate(params, (0.0, 0.0), &cfg.init, xi, cfg.dt)?;
    let x = traj.at(xi)?;
    Ok([cfg.n_pop * x[1], cfg.n_pop * x[2]])
}

/// Poisson draw of the reported asymptomatic and symptomatic counts at day `xi`.
pub fn siqr_observe(params: &SiqrParams, xi: f64, cfg: &SiqrConfig, rng: &mut dyn RngCore) -> Result<[f64; 2]> {
    let truth = siqr_true_counts(params, xi, cfg)?;
    let mut y = [0.0; 2];
    for (yc, t) in y.iter_mut().zip(truth) {
        let rate = REPORTING_RATE * t;
        *yc = if rate > 0.0 {
            Poisson::new(rate).map_err(|e| Error::Numerical(e.to_string()))?.sample(rng)
        } else {
            0.0
        };
    }
    Ok(y)
}

fn count(y: f64) -> Result<u64> {
    if !(y >= 0.0 && y.is_finite()) {
        return Err(Error::Domain(format!("count {y} is not a nonnegative number")));
    }
    Ok(y.round() as u64)
}

/// Poisson log-mass tolerant of a vanishing rate.
fn poisson_ll(y: f64, rate: f64) -> Result<f64> {
    let k = count(y)?;
    if rate > 0.0 {
        poisson_logpmf(k, rate)
    } else if k == 0 {
        Ok(0.0)
    } else {
        poisson_logpmf(k, f64::MIN_POSITIVE)
    }
}

/// Poisson score in `ξ` summed over both channels, with `∂y_true/∂ξ` from
/// central differences of the dense trajectory.
pub fn siqr_score_dxi(y_obs: &[f64], params: &SiqrParams, xi: f64, h_fd: f64, cfg: &SiqrConfig) -> Result<f64> {
    if xi - h_fd < 0.0 {
        return Err(Error::InvalidArgument(format!("ξ − h_fd = {} is negative", xi - h_fd)));
    }
    let traj = siqr_integrate(params, (0.0, 0.0), &cfg.init, xi + h_fd, cfg.dt)?;
    let (xp, x0, xm) = (traj.at(xi + h_fd)?, traj.at(xi)?, traj.at(xi - h_fd)?);
    let mut score = 0.0;
    for (c, comp) in [1usize, 2].into_iter().enumerate() {
        let rates = [xm[comp], x0[comp], xp[comp]].map(|x| REPORTING_RATE * cfg.n_pop * x);
        if rates.iter().any(|r| *r <= 0.0) {
            return Err(Error::ZeroRate);
        }
        let dtrue = cfg.n_pop * (xp[comp] - xm[comp]) / (2.0 * h_fd);
        count(y_obs[c])?;
        score += (y_obs[c] / rates[1] - 1.0) * REPORTING_RATE * dtrue;
    }
    Ok(score)
}

#[derive(Debug, Clone)]
pub struct SiqrModel {
    pub cfg: SiqrConfig,
    prior: Family,
}

impl SiqrModel {
    pub fn new(cfg: SiqrConfig) -> Result<Self> {
        cfg.validate()?;
        let prior = Family::LogNormal(DiagLogNormal::new(cfg.prior_mu.clone(), cfg.prior_sigma.clone())?);
        Ok(Self { cfg, prior })
    }

    fn check_xi(&self, xi: &[f64]) -> Result<f64> {
        match xi {
            [t] if *t > 0.0 && t.is_finite() => Ok(*t),
            _ => Err(Error::InvalidArgument(format!("SIQR design must be one positive time, got {xi:?}"))),
        }
    }
}

impl ForwardModel for SiqrModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Siqr
    }

    fn prior(&self) -> &Family {
        &self.prior
    }

    fn obs_dim(&self) -> usize {
        2
    }

    fn design_dim(&self) -> usize {
        1
    }

    fn design_grid(&self) -> Vec<Vec<f64>> {
        self.cfg.grid.iter().map(|t| vec![*t]).collect()
    }

    fn design_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let hi = self.cfg.grid.iter().cloned().fold(1.0, f64::max);
        (vec![1.0], vec![if hi > 1.0 { hi } else { 2.0 }])
    }

    fn simulate(&self, theta: &[f64], xi: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let t = self.check_xi(xi)?;
        let params = SiqrParams::from_theta(theta, &self.cfg)?;
        Ok(siqr_observe(&params, t, &self.cfg, rng)?.to_vec())
    }

    fn loglik(&self, y: &[f64], theta: &[f64], xi: &[f64]) -> Result<f64> {
        let t = self.check_xi(xi)?;
        let params = SiqrParams::from_theta(theta, &self.cfg)?;
        let truth = siqr_true_counts(&params, t, &self.cfg)?;
        Ok(poisson_ll(y[0], REPORTING_RATE * truth[0])? + poisson_ll(y[1], REPORTING_RATE * truth[1])?)
    }

    fn loglik_grad(&self, y: &[f64], theta: &[f64], xi: &[f64]) -> Result<(f64, Vec<f64>)> {
        let t = self.check_xi(xi)?;
        let params = SiqrParams::from_theta(theta, &self.cfg)?;
        let rates: [Dual<4>; 4] = [0, 1, 2, 3].map(|k| Dual::variable(params.rates()[k], k));
        let traj = integrate_generic(rates, self.cfg.eps_rate, (0.0, 0.0), self.cfg.init.to_array(), t, self.cfg.dt)?;
        let x = traj.at(t)?;
        let mut ll = 0.0;
        let mut grad = vec![0.0; 4];
        for (c, comp) in [1usize, 2].into_iter().enumerate() {
            let scale = REPORTING_RATE * self.cfg.n_pop;
            let rate = scale * x[comp].v;
            ll += poisson_ll(y[c], rate)?;
            if rate > 0.0 {
                let k = count(y[c])? as f64;
                let dl_drate = k / rate - 1.0;
                for (g, d) in grad.iter_mut().zip(x[comp].d) {
                    *g += dl_drate * scale * d;
                }
            }
        }
        Ok((ll, grad))
    }

    fn score_dxi(&self, y: &[f64], theta: &[f64], xi: &[f64]) -> Result<Vec<f64>> {
        let t = self.check_xi(xi)?;
        let params = SiqrParams::from_theta(theta, &self.cfg)?;
        Ok(vec![siqr_score_dxi(y, &params, t, self.cfg.h_fd, &self.cfg)?])
    }

    fn obs_features(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| v.max(0.0).ln_1p()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::RandomStream;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn median_params() -> SiqrParams {
        let cfg = SiqrConfig::default();
        SiqrParams::from_theta(&cfg.prior_mu.iter().map(|m| m.exp()).collect::<Vec<_>>(), &cfg).unwrap()
    }

    #[test]
    fn no_dynamics_keeps_s_constant() {
        let p = SiqrParams { beta_a: 0.0, beta_s: 0.0, ..median_params() };
        let init = SiqrState { s: 0.7, x_a: 0.0, x_s: 0.0, h: 0.3 };
        let traj = siqr_integrate(&p, (0.0, 0.0), &init, 20.0, 0.1).unwrap();
        for t in [0.0, 3.3, 11.7, 20.0] {
            assert_eq!(traj.at(t).unwrap()[0], 0.7);
        }
    }

    #[test]
    fn population_is_conserved() {
        let cfg = SiqrConfig::default();
        let traj = siqr_integrate(&median_params(), (0.0, 0.0), &cfg.init, 100.0, 0.1).unwrap();
        for x in &traj.states {
            assert!((x.iter().sum::<f64>() - 1.0).abs() <= 1e-8);
        }
        for k in 0..=200 {
            let x = traj.at(k as f64 * 0.5).unwrap();
            assert!((x.iter().sum::<f64>() - 1.0).abs() <= 1e-8);
        }
    }

    #[test]
    fn fourth_order_convergence() {
        let cfg = SiqrConfig::default();
        let p = median_params();
        let end = |dt: f64| siqr_integrate(&p, (0.0, 0.0), &cfg.init, 10.0, dt).unwrap().at(10.0).unwrap();
        let reference = end(0.001);
        let dts = [0.1, 0.05, 0.025, 0.0125];
        let diff = |a: &[f64; 4], b: &[f64; 4]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let errs: Vec<f64> = dts.iter().map(|&h| diff(&end(h), &reference)).collect();
        // Least-squares slope of log error against log step.
        let xs: Vec<f64> = dts.iter().map(|h| h.ln()).collect();
        let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
        let (mx, my) = (xs.iter().sum::<f64>() / 4.0, ys.iter().sum::<f64>() / 4.0);
        let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
            / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
        assert!(slope >= 3.5, "order {slope}, errors {errs:?}");
    }

    #[test]
    fn leaving_simplex_is_an_error() {
        let init = SiqrState { s: 0.98, x_a: 0.01, x_s: 0.01, h: 0.0 };
        let p = median_params();
        let bad = integrate_generic(p.rates(), -5.0, (0.0, 0.0), init.to_array(), 10.0, 0.1);
        assert!(matches!(bad, Err(Error::Integration { .. })));
    }

    #[test]
    fn lambda_max_examples() {
        let (l, v, u) = lambda_max_2x2([[-1.0, 0.0], [0.0, -1.0]]).unwrap();
        assert_eq!(l, -1.0);
        assert!(u == [1.0, 0.0] || u == [0.0, 1.0]);
        assert!(v == [1.0, 0.0] || v == [0.0, 1.0]);
        let (l, _, _) = lambda_max_2x2([[0.0, 1.0], [1.0, -2.0]]).unwrap();
        assert_abs_diff_eq!(l, -1.0 + 2f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(l, 0.41421, epsilon = 1e-5);
    }

    fn power_iteration(m: [[f64; 2]; 2]) -> f64 {
        let shift = 10.0 + m[0][0].abs() + m[1][1].abs();
        let a = [[m[0][0] + shift, m[0][1]], [m[1][0], m[1][1] + shift]];
        let mut x = [1.0, 1.0];
        let mut est = 0.0;
        for _ in 0..20000 {
            let y = [a[0][0] * x[0] + a[0][1] * x[1], a[1][0] * x[0] + a[1][1] * x[1]];
            let n = y[0].hypot(y[1]);
            let next = [y[0] / n, y[1] / n];
            est = next[0] * (a[0][0] * next[0] + a[0][1] * next[1]) + next[1] * (a[1][0] * next[0] + a[1][1] * next[1]);
            if (next[0] - x[0]).abs() + (next[1] - x[1]).abs() < 1e-15 {
                break;
            }
            x = next;
        }
        est - shift
    }

    #[test]
    fn lambda_max_matches_power_iteration_and_eigen_identities() {
        let mut rng = RandomStream::new(5).rng();
        for _ in 0..100 {
            let m = [
                [rng.random_range(-3.0..3.0), rng.random_range(0.05..2.0)],
                [rng.random_range(0.05..2.0), rng.random_range(-3.0..3.0)],
            ];
            let (l, v, u) = lambda_max_2x2(m).unwrap();
            assert_abs_diff_eq!(l, power_iteration(m), epsilon = 1e-10);
            let mu = [m[0][0] * u[0] + m[0][1] * u[1], m[1][0] * u[0] + m[1][1] * u[1]];
            let vm = [v[0] * m[0][0] + v[1] * m[1][0], v[0] * m[0][1] + v[1] * m[1][1]];
            assert!((mu[0] - l * u[0]).hypot(mu[1] - l * u[1]) <= 1e-10);
            assert!((vm[0] - l * v[0]).hypot(vm[1] - l * v[1]) <= 1e-10);
            assert!(v[0] * u[0] + v[1] * u[1] > 0.0);
        }
    }

    #[test]
    fn eigenvalue_derivative_formula() {
        let mut rng = RandomStream::new(6).rng();
        let h = 1e-6;
        for _ in 0..100 {
            let m = [
                [rng.random_range(-3.0..3.0), rng.random_range(0.05..2.0)],
                [rng.random_range(0.05..2.0), rng.random_range(-3.0..3.0)],
            ];
            let (_, v, u) = lambda_max_2x2(m).unwrap();
            let vu = v[0] * u[0] + v[1] * u[1];
            for k in 0..2 {
                for l in 0..2 {
                    let (mut mp, mut mm) = (m, m);
                    mp[k][l] += h;
                    mm[k][l] -= h;
                    let fd = (lambda_max_2x2(mp).unwrap().0 - lambda_max_2x2(mm).unwrap().0) / (2.0 * h);
                    assert_abs_diff_eq!(v[k] * u[l] / vu, fd, epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn observe_is_poisson_around_reported_truth() {
        let cfg = SiqrConfig::default();
        let p = median_params();
        let truth = siqr_true_counts(&p, 5.0, &cfg).unwrap();
        let mut rng = RandomStream::new(9).rng();
        let n = 100_000;
        let mut sums = [0.0; 2];
        for _ in 0..n {
            let y = siqr_observe(&p, 5.0, &cfg, &mut rng).unwrap();
            sums[0] += y[0];
            sums[1] += y[1];
        }
        for c in 0..2 {
            let rate = REPORTING_RATE * truth[c];
            let se = (rate / n as f64).sqrt();
            assert!((sums[c] / n as f64 - rate).abs() <= 4.0 * se);
        }
        let a = siqr_observe(&p, 5.0, &cfg, &mut RandomStream::new(1).rng()).unwrap();
        let b = siqr_observe(&p, 5.0, &cfg, &mut RandomStream::new(1).rng()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_initial_infection_gives_zero_counts() {
        let cfg = SiqrConfig { init: SiqrState { s: 1.0, x_a: 0.0, x_s: 0.0, h: 0.0 }, ..SiqrConfig::default() };
        let mut rng = RandomStream::new(2).rng();
        for _ in 0..50 {
            assert_eq!(siqr_observe(&median_params(), 4.0, &cfg, &mut rng).unwrap(), [0.0, 0.0]);
        }
        assert_eq!(siqr_score_dxi(&[0.0, 0.0], &median_params(), 4.0, 1e-3, &cfg), Err(Error::ZeroRate));
    }

    #[test]
    fn score_matches_outer_finite_difference() {
        let cfg = SiqrConfig::default();
        let p = median_params();
        let y = [40.0, 21.0];
        let ll = |t: f64| {
            let truth = siqr_true_counts(&p, t, &cfg).unwrap();
            poisson_logpmf(40, REPORTING_RATE * truth[0]).unwrap() + poisson_logpmf(21, REPORTING_RATE * truth[1]).unwrap()
        };
        for xi in [2.0, 5.5, 9.0, 13.0] {
            let s = siqr_score_dxi(&y, &p, xi, 1e-3, &cfg).unwrap();
            let fd = (ll(xi + 1e-4) - ll(xi - 1e-4)) / 2e-4;
            assert!((s - fd).abs() <= 1e-4 * fd.abs().max(1.0), "ξ={xi}: {s} vs {fd}");
        }
        let truth = siqr_true_counts(&p, 6.0, &cfg).unwrap();
        let exact = [REPORTING_RATE * truth[0], REPORTING_RATE * truth[1]];
        assert!(siqr_score_dxi(&exact, &p, 6.0, 1e-3, &cfg).unwrap().abs() <= 1e-9);
    }

    #[test]
    fn loglik_gradient_matches_finite_differences() {
        let model = SiqrModel::new(SiqrConfig::default()).unwrap();
        let theta = [1.7, 2.1, 1.1, 1.3];
        let y = [35.0, 18.0];
        let (ll, g) = model.loglik_grad(&y, &theta, &[6.0]).unwrap();
        assert_abs_diff_eq!(ll, model.loglik(&y, &theta, &[6.0]).unwrap(), epsilon = 1e-10);
        for k in 0..4 {
            let h = 1e-6;
            let (mut tp, mut tm) = (theta, theta);
            tp[k] += h;
            tm[k] -= h;
            let fd = (model.loglik(&y, &tp, &[6.0]).unwrap() - model.loglik(&y, &tm, &[6.0]).unwrap()) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-5 * (1.0 + g[k].abs()), "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn poisson_sums_to_one() {
        for rate in [0.3, 4.0, 17.5, 50.0] {
            let total: f64 = (0..=200).map(|k| poisson_logpmf(k, rate).unwrap().exp()).sum();
            assert!((total - 1.0).abs() <= 1e-8);
        }
    }

    proptest! {
        #[test]
        fn trajectory_stays_in_simplex(theta in proptest::collection::vec(0.05f64..8.0, 4), t in 1.0f64..15.0) {
            let cfg = SiqrConfig::default();
            let p = SiqrParams::from_theta(&theta, &cfg).unwrap();
            let traj = siqr_integrate(&p, (0.0, 0.0), &cfg.init, t, cfg.dt).unwrap();
            let x = traj.at(t).unwrap();
            prop_assert!(x.iter().all(|v| *v >= -1e-6 && *v <= 1.0 + 1e-6));
        }
    }
}
