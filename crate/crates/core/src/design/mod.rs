//! Outer-loop design evaluation: nested Monte Carlo EIG, the expected robust
//! cost `L(ξ)` and its gradient, grid sweeps, projected gradient search and
//! the null-space leakage check.

use rand::RngCore;
use rayon::prelude::*;

use crate::amortizer::{posterior_with_jacobian, posterior_with_weight_derivatives, EncoderWeights};
use crate::decision::{envelope_grad, pad_infeasible, solve, DecisionProblem, RiskSpec};
use crate::error::{Error, Result};
use crate::models::ForwardModel;
use crate::prob::{kahan_sum, logsumexp, mean_stderr, normalize_weights, RandomStream, WeightedPosterior};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Budgets {
    pub n_outer_eig: usize,
    pub n_inner_eig: usize,
    pub n_outer_cost: usize,
    pub n_posterior: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        Self { n_outer_eig: 2000, n_inner_eig: 500, n_outer_cost: 200, n_posterior: 40 }
    }
}

impl Budgets {
    pub fn validate(&self) -> Result<()> {
        if [self.n_outer_eig, self.n_inner_eig, self.n_outer_cost, self.n_posterior].contains(&0) {
            return Err(Error::InvalidArgument(format!("all budgets must be at least 1: {self:?}")));
        }
        Ok(())
    }
}

/// Nested Monte Carlo EIG with its outer-sample standard error. Inner
/// parameters are drawn fresh from the prior for every outer sample.
pub fn eig_nmc(model: &dyn ForwardModel, xi: &[f64], budgets: &Budgets, stream: RandomStream) -> Result<(f64, f64)> {
    budgets.validate()?;
    let m = budgets.n_inner_eig;
    let terms: Vec<f64> = (0..budgets.n_outer_eig)
        .into_par_iter()
        .map(|n| {
            let mut rng = stream.split(n as u64).rng();
            let theta = model.prior().sample(&mut rng);
            let y = model.simulate(&theta, xi, &mut rng as &mut dyn RngCore)?;
            let ll = model.loglik(&y, &theta, xi)?;
            let inner: Vec<f64> = (0..m)
                .map(|_| {
                    let t = model.prior().sample(&mut rng);
                    model.loglik(&y, &t, xi).unwrap_or(f64::NEG_INFINITY)
                })
                .collect();
            let v = ll - (logsumexp(&inner) - (m as f64).ln());
            if !v.is_finite() {
                return Err(Error::NonFiniteEstimate(format!("EIG term at outer sample {n}")));
            }
            Ok(v)
        })
        .collect::<Result<_>>()?;
    Ok(mean_stderr(&terms))
}

/// Posterior mean-squared error of one parameter coordinate, with the
/// posterior mean from self-normalized importance sampling under the prior.
pub fn posterior_mse(model: &dyn ForwardModel, xi: &[f64], component: usize, budgets: &Budgets, stream: RandomStream) -> Result<(f64, f64)> {
    budgets.validate()?;
    if component >= model.theta_dim() {
        return Err(Error::InvalidArgument(format!("no θ component {component}")));
    }
    let terms: Vec<f64> = (0..budgets.n_outer_eig)
        .into_par_iter()
        .map(|n| {
            let mut rng = stream.split(n as u64).rng();
            let theta = model.prior().sample(&mut rng);
            let y = model.simulate(&theta, xi, &mut rng as &mut dyn RngCore)?;
            let inner: Vec<Vec<f64>> = (0..budgets.n_inner_eig).map(|_| model.prior().sample(&mut rng)).collect();
            let log_w: Vec<f64> = inner.iter().map(|t| model.loglik(&y, t, xi).unwrap_or(f64::NEG_INFINITY)).collect();
            let w = normalize_weights(&log_w)?;
            let est = kahan_sum(w.iter().zip(&inner).map(|(w, t)| w * t[component]));
            Ok((est - theta[component]).powi(2))
        })
        .collect::<Result<_>>()?;
    Ok(mean_stderr(&terms))
}

/// Everything needed to evaluate the expected robust cost of a design.
#[derive(Clone, Copy)]
pub struct CostSetup<'a> {
    pub model: &'a dyn ForwardModel,
    pub problem: &'a dyn DecisionProblem,
    pub risk: RiskSpec,
    pub phi: &'a EncoderWeights,
    /// Cost assigned when no outer sample admits a feasible decision.
    pub penalty: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossEstimate {
    pub value: f64,
    pub stderr: f64,
    pub feasible_frac: f64,
    /// Outer samples dropped for degenerate weights or failed simulation.
    pub dropped: usize,
    /// Every kept sample was infeasible and the penalty was used.
    pub all_infeasible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub grad: Vec<f64>,
    pub stderr: Vec<f64>,
    pub pathwise: Vec<f64>,
    /// Envelope term through the design dependence of the importance weights.
    pub weight: Vec<f64>,
    pub score: Vec<f64>,
    /// Cost estimate from the same outer samples.
    pub value: f64,
    pub dropped: usize,
}

struct Outer {
    theta: Vec<f64>,
    y: Vec<f64>,
    post: WeightedPosterior,
}

/// Draws θ and y for outer sample `n`, then the amortized posterior. `None`
/// marks a sample dropped for degenerate weights or a failed simulation.
fn outer_sample(setup: &CostSetup, xi: &[f64], n_post: usize, stream: RandomStream, weight_derivatives: bool) -> Result<Option<Outer>> {
    let mut rng = stream.rng();
    let theta = setup.model.prior().sample(&mut rng);
    let y = match setup.model.simulate(&theta, xi, &mut rng as &mut dyn RngCore) {
        Ok(y) => y,
        Err(Error::Integration { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let post = if weight_derivatives {
        posterior_with_weight_derivatives(setup.phi, setup.model, xi, &y, n_post, &mut rng)
    } else {
        posterior_with_jacobian(setup.phi, setup.model, xi, &y, n_post, &mut rng)
    };
    match post {
        Ok(post) => Ok(Some(Outer { theta, y, post })),
        Err(Error::DegenerateWeights) => Ok(None),
        Err(e) => Err(e),
    }
}

/// `L̂(ξ)`: mean optimal robust cost over simulated observations, with
/// infeasible samples padded by the feasible mean.
pub fn design_loss(setup: &CostSetup, xi: &[f64], budgets: &Budgets, stream: RandomStream) -> Result<LossEstimate> {
    budgets.validate()?;
    let results: Vec<Option<(f64, bool)>> = (0..budgets.n_outer_cost)
        .into_par_iter()
        .map(|n| {
            let Some(o) = outer_sample(setup, xi, budgets.n_posterior, stream.split(n as u64), false)? else {
                return Ok(None);
            };
            let s = solve(setup.problem, setup.risk, &o.post)?;
            Ok(Some((s.j_star, s.feasible)))
        })
        .collect::<Result<_>>()?;
    let kept: Vec<(f64, bool)> = results.iter().flatten().copied().collect();
    let dropped = results.len() - kept.len();
    if kept.is_empty() {
        return Err(Error::NonFiniteEstimate("every outer sample was dropped".into()));
    }
    let feasible = kept.iter().filter(|k| k.1).count();
    let (padded, all_infeasible) = pad_infeasible(&kept, setup.penalty);
    let (value, stderr) = mean_stderr(&padded);
    Ok(LossEstimate { value, stderr, feasible_frac: feasible as f64 / kept.len() as f64, dropped, all_infeasible })
}

/// Total design gradient: pathwise envelope term through the reparameterized
/// posterior samples, the envelope term through the importance weights (mean
/// and CVaR only), plus the score term `(J* − b)·∇_ξ log p(y|θ,ξ)` with a
/// running-mean baseline `b` over earlier outer samples.
pub fn design_loss_gradient(setup: &CostSetup, xi: &[f64], budgets: &Budgets, stream: RandomStream) -> Result<GradientEstimate> {
    budgets.validate()?;
    let p = xi.len();
    // Chance constraints depend on the weights only through scenario switching.
    let reweight = !matches!(setup.risk, RiskSpec::Chance(_));
    let results: Vec<Option<OuterGrad>> = (0..budgets.n_outer_cost)
        .into_par_iter()
        .map(|n| {
            let Some(o) = outer_sample(setup, xi, budgets.n_posterior, stream.split(n as u64), reweight)? else {
                return Ok(None);
            };
            let s = solve(setup.problem, setup.risk, &o.post)?;
            let score = setup.model.score_dxi(&o.y, &o.theta, xi)?;
            let (mut path, mut weight) = (vec![0.0; p], vec![0.0; p]);
            if s.feasible {
                let env = envelope_grad(setup.problem, &s, &o.post)?;
                if env.degenerate_active_set {
                    return Ok(None);
                }
                for (i, g) in env.per_sample.iter().enumerate() {
                    for (k, gk) in g.iter().enumerate() {
                        for (j, pj) in path.iter_mut().enumerate() {
                            *pj += gk * o.post.jacobian(i, k, j);
                        }
                    }
                }
                if reweight {
                    for (dw, pw) in o.post.dweight_dxi().iter().zip(&env.per_weight) {
                        for (j, wj) in weight.iter_mut().enumerate() {
                            *wj += pw * dw[j];
                        }
                    }
                }
            }
            Ok(Some(OuterGrad { j_star: s.j_star, feasible: s.feasible, path, weight, score }))
        })
        .collect::<Result<_>>()?;
    let kept: Vec<&OuterGrad> = results.iter().flatten().collect();
    let dropped = results.len() - kept.len();
    if kept.is_empty() {
        return Err(Error::NonFiniteEstimate("every outer sample was dropped".into()));
    }
    let costs: Vec<(f64, bool)> = kept.iter().map(|k| (k.j_star, k.feasible)).collect();
    let (padded, _) = pad_infeasible(&costs, setup.penalty);
    let mut totals = vec![Vec::with_capacity(kept.len()); p];
    let mut scores = vec![Vec::with_capacity(kept.len()); p];
    let mut running = 0.0;
    for (n, (k, jn)) in kept.iter().zip(&padded).enumerate() {
        let baseline = if n == 0 { 0.0 } else { running / n as f64 };
        for j in 0..p {
            let sc = (jn - baseline) * k.score[j];
            scores[j].push(sc);
            totals[j].push(k.path[j] + k.weight[j] + sc);
        }
        running += jn;
    }
    let column_mean = |f: &dyn Fn(&OuterGrad) -> f64| mean_stderr(&kept.iter().map(|k| f(k)).collect::<Vec<_>>()).0;
    let (grad, stderr): (Vec<f64>, Vec<f64>) = totals.iter().map(|t| mean_stderr(t)).unzip();
    Ok(GradientEstimate {
        grad,
        stderr,
        pathwise: (0..p).map(|j| column_mean(&|k| k.path[j])).collect(),
        weight: (0..p).map(|j| column_mean(&|k| k.weight[j])).collect(),
        score: scores.iter().map(|v| mean_stderr(v).0).collect(),
        value: mean_stderr(&padded).0,
        dropped,
    })
}

struct OuterGrad {
    j_star: f64,
    feasible: bool,
    path: Vec<f64>,
    weight: Vec<f64>,
    score: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    /// Start design; the midpoint `⌊(T+1)/2⌋` of the bounds when `None`.
    pub xi_init: Option<Vec<f64>>,
    /// Length of the first step in design units.
    pub first_step: f64,
    /// Step `k` has length `first_step / (1 + k/decay)`.
    pub decay: f64,
    pub max_iter: usize,
    /// Stops once the gradient norm falls below this.
    pub grad_tol: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { xi_init: None, first_step: 2.0, decay: 5.0, max_iter: 10, grad_tol: 1e-8 }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.first_step > 0.0 && self.decay > 0.0 && self.grad_tol >= 0.0) {
            return Err(Error::InvalidArgument(format!("invalid search settings {self:?}")));
        }
        Ok(())
    }

    pub fn step_length(&self, k: usize) -> f64 {
        self.first_step / (1.0 + k as f64 / self.decay)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchStep {
    pub iter: usize,
    pub xi: Vec<f64>,
    pub grad: Vec<f64>,
    pub grad_norm: f64,
    /// Projected continuous update.
    pub xi_next: Vec<f64>,
    /// Rounded update and its re-evaluated cost.
    pub xi_hat: Vec<f64>,
    pub j_hat: f64,
}

/// Projected descent `ξ ← Π(ξ − ω_k s_k)` where the step moves
/// [`SearchConfig::step_length`] units along `−s_k`. `grad(k, ξ)` supplies
/// `s_k`; `value(k, ξ̂)` evaluates the rounded design.
pub fn search_with<G, V>(cfg: &SearchConfig, lo: &[f64], hi: &[f64], mut grad: G, mut value: V) -> Result<Vec<SearchStep>>
where
    G: FnMut(usize, &[f64]) -> Result<Vec<f64>>,
    V: FnMut(usize, &[f64]) -> Result<f64>,
{
    cfg.validate()?;
    let mut xi = cfg.xi_init.clone().unwrap_or_else(|| hi.iter().map(|h| ((h + 1.0) / 2.0).floor()).collect());
    let mut trace = Vec::new();
    for k in 0..cfg.max_iter {
        let s = grad(k, &xi)?;
        let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFiniteEstimate(format!("design gradient at iteration {k}")));
        }
        if norm < cfg.grad_tol {
            let j = value(k, &xi)?;
            trace.push(SearchStep { iter: k, xi: xi.clone(), grad: s, grad_norm: norm, xi_next: xi.clone(), xi_hat: xi.iter().map(|v| v.round()).collect(), j_hat: j });
            break;
        }
        let omega = cfg.step_length(k) / norm;
        let next: Vec<f64> = xi.iter().zip(&s).enumerate().map(|(j, (x, g))| (x - omega * g).clamp(lo[j], hi[j])).collect();
        let rounded: Vec<f64> = next.iter().enumerate().map(|(j, v)| v.round().clamp(lo[j], hi[j])).collect();
        let j_hat = value(k, &rounded)?;
        trace.push(SearchStep { iter: k, xi: xi.clone(), grad: s, grad_norm: norm, xi_next: next.clone(), xi_hat: rounded, j_hat });
        xi = next;
    }
    Ok(trace)
}

/// Projected gradient search on `L(ξ)` over the model's design box.
pub fn projected_gradient_search(setup: &CostSetup, cfg: &SearchConfig, budgets: &Budgets, stream: RandomStream) -> Result<Vec<SearchStep>> {
    let (lo, hi) = setup.model.design_bounds();
    search_with(
        cfg,
        &lo,
        &hi,
        |k, xi| Ok(design_loss_gradient(setup, xi, budgets, stream.split(2 * k as u64))?.grad),
        |k, xi| Ok(design_loss(setup, xi, budgets, stream.split(2 * k as u64 + 1))?.value),
    )
}

#[derive(Clone, Copy)]
pub enum Metric<'a> {
    Eig,
    DesignLoss(CostSetup<'a>),
    /// Posterior MSE of one θ coordinate under the outer/inner EIG budgets.
    PosteriorMse(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub xi: Vec<f64>,
    pub value: f64,
    pub stderr: f64,
    pub feasible_frac: f64,
    pub error: Option<String>,
}

/// Evaluates `metric` at every design with stream `split(index)`; rows come
/// back sorted by design. A failing design records its error and the sweep
/// continues.
pub fn grid_sweep(model: &dyn ForwardModel, metric: Metric, designs: &[Vec<f64>], budgets: &Budgets, stream: RandomStream) -> Vec<SweepRow> {
    let mut rows: Vec<SweepRow> = designs
        .iter()
        .enumerate()
        .map(|(i, xi)| {
            let s = stream.split(i as u64);
            let res = match metric {
                Metric::Eig => eig_nmc(model, xi, budgets, s).map(|(v, e)| (v, e, 1.0)),
                Metric::PosteriorMse(c) => posterior_mse(model, xi, c, budgets, s).map(|(v, e)| (v, e, 1.0)),
                Metric::DesignLoss(setup) => design_loss(&setup, xi, budgets, s).map(|l| (l.value, l.stderr, l.feasible_frac)),
            };
            match res {
                Ok((value, stderr, feasible_frac)) => SweepRow { xi: xi.clone(), value, stderr, feasible_frac, error: None },
                Err(e) => SweepRow { xi: xi.clone(), value: f64::NAN, stderr: f64::NAN, feasible_frac: 0.0, error: Some(e.to_string()) },
            }
        })
        .collect();
    rows.sort_by(|a, b| a.xi.partial_cmp(&b.xi).unwrap_or(std::cmp::Ordering::Equal));
    rows
}

/// Orthogonal projector `QQᵀ` onto the span of `basis` (Gram-Schmidt first).
pub fn projector(basis: &[Vec<f64>], dim: usize) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    for b in basis {
        let mut v = b.clone();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-12 {
            q.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    (0..dim).map(|r| (0..dim).map(|c| q.iter().map(|u| u[r] * u[c]).sum()).collect()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NullSpaceReport {
    /// `max_i ‖(∂J*/∂θ⁽ⁱ⁾)(I − P*)‖∞`.
    pub leakage: f64,
    /// Pathwise `dJ*/dξ` split into the `P*` channel and its complement.
    pub task_channel: Vec<f64>,
    pub null_channel: Vec<f64>,
    pub feasible: bool,
}

/// Splits the pathwise design gradient of one decision solve into the part
/// flowing through `P*θ` and the part through `(I − P*)θ`.
pub fn null_space_check(problem: &dyn DecisionProblem, risk: RiskSpec, proj: &[Vec<f64>], post: &WeightedPosterior) -> Result<NullSpaceReport> {
    let d = post.dim();
    if proj.len() != d || proj.iter().any(|r| r.len() != d) {
        return Err(Error::Shape(format!("projector must be {d}×{d}")));
    }
    let s = solve(problem, risk, post)?;
    let p = post.design_dim;
    if !s.feasible {
        return Ok(NullSpaceReport { leakage: 0.0, task_channel: vec![0.0; p], null_channel: vec![0.0; p], feasible: false });
    }
    let env = envelope_grad(problem, &s, post)?;
    let mut leakage: f64 = 0.0;
    let mut task = vec![0.0; p];
    let mut null = vec![0.0; p];
    for (i, g) in env.per_sample.iter().enumerate() {
        // Row vectors g P* and g (I − P*).
        let gp: Vec<f64> = (0..d).map(|c| (0..d).map(|r| g[r] * proj[r][c]).sum()).collect();
        let gn: Vec<f64> = (0..d).map(|c| g[c] - gp[c]).collect();
        leakage = leakage.max(gn.iter().fold(0.0, |m, v| m.max(v.abs())));
        for j in 0..p {
            for k in 0..d {
                let jac = post.jacobian(i, k, j);
                task[j] += gp[k] * jac;
                null[j] += gn[k] * jac;
            }
        }
    }
    Ok(NullSpaceReport { leakage, task_channel: task, null_channel: null, feasible: true })
}

/// Random weighted posterior with design Jacobians, standing in for an
/// amortizer output in synthetic checks.
pub fn synthetic_posterior(theta_dim: usize, design_dim: usize, n: usize, stream: RandomStream) -> WeightedPosterior {
    use rand::Rng;
    let mut rng = stream.rng();
    let thetas: Vec<Vec<f64>> = (0..n).map(|_| (0..theta_dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut post = WeightedPosterior::from_samples(thetas, raw.iter().map(|w| w / total).collect());
    post.design_dim = design_dim;
    post.dtheta_dxi = (0..n).map(|_| (0..theta_dim * design_dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    post
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::amortizer::HeadBounds;
    use crate::decision::{DoseProblem, LinearThresholdProblem, QuarantineProblem};
    use crate::models::pk::{PkConfig, PkModel};
    use crate::models::LinearGaussian;

    #[test]
    fn linear_gaussian_eig_matches_closed_form() {
        let m = LinearGaussian::standard();
        let b = Budgets { n_outer_eig: 2000, n_inner_eig: 500, ..Budgets::default() };
        for (k, xi) in [0.0, 0.5, 1.0, 2.0].into_iter().enumerate() {
            let (v, se) = eig_nmc(&m, &[xi], &b, RandomStream::new(11).split(k as u64)).unwrap();
            assert!((v - m.eig(xi)).abs() <= 3.0 * se.max(1e-12) + 1e-12, "ξ={xi}: {v} ± {se} vs {}", m.eig(xi));
        }
    }

    #[test]
    fn eig_is_deterministic_and_order_free() {
        let m = LinearGaussian::standard();
        let b = Budgets { n_outer_eig: 200, n_inner_eig: 50, ..Budgets::default() };
        let designs = vec![vec![1.0], vec![0.5], vec![1.0]];
        let rows = grid_sweep(&m, Metric::Eig, &designs, &b, RandomStream::new(3));
        assert_eq!(rows[0].xi, vec![0.5]);
        let direct = eig_nmc(&m, &[1.0], &b, RandomStream::new(3).split(0)).unwrap();
        assert!(rows.iter().any(|r| r.xi == vec![1.0] && r.value == direct.0));
        assert!(rows.iter().all(|r| r.value >= -3.0 * r.stderr));
    }

    fn pk_setup() -> (PkModel, DoseProblem, EncoderWeights) {
        let model = PkModel::new(PkConfig::default()).unwrap();
        let phi = EncoderWeights::zeros(&model, HeadBounds::for_prior(model.prior()));
        let (c, a) = model.calibrate_thresholds(2000, 0.5).unwrap();
        (model, DoseProblem::new(1.0, 400.0, c, a).unwrap(), phi)
    }

    #[test]
    fn loss_is_deterministic() {
        let (model, prob, phi) = pk_setup();
        let setup = CostSetup { model: &model, problem: &prob, risk: RiskSpec::Chance(0.8), phi: &phi, penalty: 10.0 };
        let b = Budgets { n_outer_cost: 20, n_posterior: 20, ..Budgets::default() };
        let a = design_loss(&setup, &[10.0], &b, RandomStream::new(5)).unwrap();
        let c = design_loss(&setup, &[10.0], &b, RandomStream::new(5)).unwrap();
        assert_eq!(a, c);
        assert!(a.stderr >= 0.0 && (0.0..=1.0).contains(&a.feasible_frac));
    }

    /// Decision problem with no θ dependence: `J(g) = (g − ½)² + 1`.
    struct Unconstrained;

    impl DecisionProblem for Unconstrained {
        fn dim(&self) -> usize {
            1
        }
        fn theta_dim(&self) -> usize {
            3
        }
        fn num_constraints(&self) -> usize {
            1
        }
        fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
            (vec![0.0], vec![1.0])
        }
        fn cost(&self, g: &[f64], grad: &mut [f64]) -> f64 {
            grad[0] = 2.0 * (g[0] - 0.5);
            (g[0] - 0.5).powi(2) + 1.0
        }
        fn add_cost_hessian(&self, _g: &[f64], w: f64, h: &mut nalgebra::DMatrix<f64>) {
            h[(0, 0)] += 2.0 * w;
        }
        fn constraint(&self, _j: usize, _g: &[f64], _theta: &[f64], grad_g: &mut [f64]) -> f64 {
            grad_g[0] = 0.0;
            -1.0
        }
        fn constraint_grad_theta(&self, _j: usize, _g: &[f64], _theta: &[f64]) -> Vec<f64> {
            vec![0.0; 3]
        }
    }

    #[test]
    fn constant_cost_has_zero_spread_and_mean_zero_gradient() {
        let (model, _, phi) = pk_setup();
        let setup = CostSetup { model: &model, problem: &Unconstrained, risk: RiskSpec::Mean, phi: &phi, penalty: 10.0 };
        let b = Budgets { n_outer_cost: 300, n_posterior: 10, ..Budgets::default() };
        let l = design_loss(&setup, &[8.0], &b, RandomStream::new(2)).unwrap();
        assert!((l.value - 1.0).abs() < 1e-7 && l.stderr < 1e-7);
        let g = design_loss_gradient(&setup, &[8.0], &b, RandomStream::new(2)).unwrap();
        assert!(g.pathwise[0].abs() < 1e-6);
        assert!(g.grad[0].abs() <= 3.0 * g.stderr[0] + 1e-9, "{g:?}");
    }

    #[test]
    fn search_stays_at_fixed_point() {
        let cfg = SearchConfig::default();
        let tr = search_with(&cfg, &[1.0], &[24.0], |_, _| Ok(vec![0.0]), |_, _| Ok(0.0)).unwrap();
        assert_eq!(tr.len(), 1);
        assert_eq!(tr[0].xi, vec![12.0]);
    }

    #[test]
    fn search_converges_on_quadratic() {
        let cfg = SearchConfig::default();
        let tr = search_with(&cfg, &[1.0], &[24.0], |_, x| Ok(vec![2.0 * (x[0] - 22.0)]), |_, x| Ok((x[0] - 22.0).powi(2))).unwrap();
        assert!(tr.len() <= 10);
        assert_eq!(tr.last().unwrap().xi_hat, vec![22.0]);
        assert!((tr[0].xi_next[0] - tr[0].xi[0]).abs() <= 2.0 + 1e-12);
    }

    #[test]
    fn search_respects_bounds() {
        let cfg = SearchConfig { first_step: 50.0, ..SearchConfig::default() };
        let tr = search_with(&cfg, &[1.0], &[15.0], |_, _| Ok(vec![-1.0]), |_, _| Ok(0.0)).unwrap();
        assert!(tr.iter().all(|s| s.xi_next[0] <= 15.0 && s.xi_hat[0] <= 15.0));
    }

    #[test]
    fn projector_is_idempotent_and_symmetric() {
        let p = projector(&[vec![1.0, 1.0, 0.0], vec![0.0, 1.0, 1.0]], 3);
        for r in 0..3 {
            for c in 0..3 {
                let pp: f64 = (0..3).map(|k| p[r][k] * p[k][c]).sum();
                assert!((pp - p[r][c]).abs() < 1e-14 && (p[r][c] - p[c][r]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn null_space_leakage_examples() {
        let post = synthetic_posterior(2, 1, 12, RandomStream::new(4));
        let e1 = projector(&[vec![1.0, 0.0]], 2);
        let inside = LinearThresholdProblem { a: vec![1.0, 0.0], lo: -5.0, hi: 5.0 };
        for risk in [RiskSpec::Mean, RiskSpec::Chance(0.8), RiskSpec::CVaR(0.7)] {
            let r = null_space_check(&inside, risk, &e1, &post).unwrap();
            assert!(r.feasible && r.leakage <= 1e-12, "{risk}: {}", r.leakage);
            assert!(r.null_channel[0].abs() <= 1e-12);
            let full = null_space_check(&inside, risk, &projector(&[vec![1.0, 0.0], vec![0.0, 1.0]], 2), &post).unwrap();
            assert_eq!(full.leakage, 0.0);
        }
        let outside = LinearThresholdProblem { a: vec![1.0, 0.5], lo: -5.0, hi: 5.0 };
        assert!(null_space_check(&outside, RiskSpec::Chance(0.8), &e1, &post).unwrap().leakage > 0.1);
    }

    #[test]
    fn quarantine_envelope_flows_into_pathwise_term() {
        let q = QuarantineProblem::standard(0.2, 0.98).unwrap();
        let mut post = synthetic_posterior(4, 1, 6, RandomStream::new(9));
        for t in post.thetas.iter_mut() {
            *t = vec![0.5 + 0.1 * t[0], 0.8 + 0.1 * t[1], 0.2 + 0.05 * t[2], 0.2 + 0.05 * t[3]];
        }
        let r = null_space_check(&q, RiskSpec::Chance(0.9), &projector(&[], 4), &post).unwrap();
        // With P* = 0 everything lands in the complement.
        assert!(r.task_channel[0] == 0.0 && r.null_channel[0].abs() > 0.0);
    }
}
