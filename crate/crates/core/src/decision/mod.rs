//! Convex downstream decisions under a weighted posterior: mean, chance
//! (weighted scenario) and CVaR (epigraph) risk layers, with KKT residuals and
//! envelope sensitivities `∂J*/∂θ⁽ⁱ⁾`.

pub mod ipm;
pub mod problems;

use std::fmt;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::prob::WeightedPosterior;
use ipm::{IpmSettings, Outcome, Program, SmoothFn};

pub use problems::{DoseProblem, LinearThresholdProblem, QuarantineProblem};

/// Multipliers and constraint values below this are treated as zero when
/// classifying the active set.
pub const ACTIVE_TOL: f64 = 1e-7;

/// Initial `T_j / (1 + max |c_j|)` for the CVaR threshold floor.
const TAU_FLOOR_SCALE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RiskSpec {
    Mean,
    Chance(f64),
    CVaR(f64),
}

impl RiskSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RiskSpec::Mean => Ok(()),
            RiskSpec::Chance(eta) | RiskSpec::CVaR(eta) if eta > 0.0 && eta < 1.0 => Ok(()),
            other => Err(Error::InvalidArgument(format!("risk level outside (0, 1): {other}"))),
        }
    }
}

impl fmt::Display for RiskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RiskSpec::Mean => write!(f, "mean"),
            RiskSpec::Chance(eta) => write!(f, "chance({eta})"),
            RiskSpec::CVaR(eta) => write!(f, "cvar({eta})"),
        }
    }
}

impl std::str::FromStr for RiskSpec {
    type Err = Error;

    /// Parses `mean`, `chance(0.9)` or `cvar(0.7)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "mean" {
            return Ok(RiskSpec::Mean);
        }
        let parse = |prefix: &str| -> Option<f64> {
            s.strip_prefix(prefix)?.strip_prefix('(')?.strip_suffix(')')?.trim().parse().ok()
        };
        let r = if let Some(eta) = parse("chance") {
            RiskSpec::Chance(eta)
        } else if let Some(eta) = parse("cvar") {
            RiskSpec::CVaR(eta)
        } else {
            return Err(Error::InvalidArgument(format!("unknown risk spec `{s}`")));
        };
        r.validate()?;
        Ok(r)
    }
}

/// Convex decision problem `min J(g)` on a box with per-sample constraints
/// `c_j(g, θ) ≤ 0`. `J` and each `c_j(·, θ)` must be convex in `g`.
pub trait DecisionProblem: Send + Sync {
    fn dim(&self) -> usize;
    fn theta_dim(&self) -> usize;
    fn num_constraints(&self) -> usize;
    fn bounds(&self) -> (Vec<f64>, Vec<f64>);
    /// Cost with its gradient written into `grad`.
    fn cost(&self, g: &[f64], grad: &mut [f64]) -> f64;
    /// Adds `w · ∇²J(g)` into the leading `dim × dim` block of `h`.
    fn add_cost_hessian(&self, _g: &[f64], _w: f64, _h: &mut DMatrix<f64>) {}
    /// Constraint value with its `g`-gradient written into `grad_g`.
    fn constraint(&self, j: usize, g: &[f64], theta: &[f64], grad_g: &mut [f64]) -> f64;
    fn add_constraint_hessian(&self, _j: usize, _g: &[f64], _theta: &[f64], _w: f64, _h: &mut DMatrix<f64>) {}
    fn constraint_grad_theta(&self, j: usize, g: &[f64], theta: &[f64]) -> Vec<f64>;

    fn constraint_value(&self, j: usize, g: &[f64], theta: &[f64]) -> f64 {
        let mut t = vec![0.0; self.dim()];
        self.constraint(j, g, theta, &mut t)
    }

    fn cost_value(&self, g: &[f64]) -> f64 {
        let mut t = vec![0.0; self.dim()];
        self.cost(g, &mut t)
    }
}

/// One inequality of the assembled program.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Enforced {
    /// `c_j(g, θ̄) ≤ 0`.
    Mean { j: usize },
    /// `c_j(g, θᵢ) ≤ 0` for a retained scenario.
    Scenario { j: usize, i: usize },
    /// `c_j(g, θᵢ) − τ_j − s_ij ≤ 0`.
    Tail { j: usize, i: usize },
    /// `−s_ij ≤ 0`.
    SlackNonneg { j: usize, i: usize },
    /// `τ_j + (1/(1−η)) Σᵢ w̃ᵢ s_ij ≤ 0`.
    CvarBound { j: usize },
    /// `−T_j − τ_j ≤ 0`; removes the recession direction of the epigraph as
    /// `η → 0` and is never active at a valid solution.
    TauFloor { j: usize },
    Lower { k: usize },
    Upper { k: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionSolution {
    pub risk: RiskSpec,
    pub feasible: bool,
    pub g_star: Vec<f64>,
    pub j_star: f64,
    /// Full primal vector of the assembled program (g, then τ, then s).
    pub x: Vec<f64>,
    pub enforced: Vec<Enforced>,
    pub lambda_star: Vec<f64>,
    pub tau_star: Vec<f64>,
    /// `s_star[j][i]` for CVaR, empty otherwise.
    pub s_star: Vec<Vec<f64>>,
    pub scenarios: Vec<usize>,
    /// Indices into `enforced` with multiplier above [`ACTIVE_TOL`].
    pub active_set: Vec<usize>,
    /// Some θ-dependent constraint has both `λ` and `c` below [`ACTIVE_TOL`].
    pub degenerate: bool,
    pub converged: bool,
    tau_floor_scale: f64,
}

impl DecisionSolution {
    fn infeasible(risk: RiskSpec, scenarios: Vec<usize>) -> Self {
        Self {
            risk,
            feasible: false,
            g_star: Vec::new(),
            j_star: f64::NAN,
            x: Vec::new(),
            enforced: Vec::new(),
            lambda_star: Vec::new(),
            tau_star: Vec::new(),
            s_star: Vec::new(),
            scenarios,
            active_set: Vec::new(),
            degenerate: false,
            converged: false,
            tau_floor_scale: TAU_FLOOR_SCALE,
        }
    }
}

/// Smallest prefix of indices sorted by descending weight (ties by index)
/// whose cumulative weight reaches `eta`.
pub fn select_scenarios(w_tilde: &[f64], eta: f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..w_tilde.len()).filter(|&i| w_tilde[i] > 0.0).collect();
    idx.sort_by(|&a, &b| w_tilde[b].total_cmp(&w_tilde[a]).then(a.cmp(&b)));
    if eta >= 1.0 {
        return idx;
    }
    let mut cum = 0.0;
    let mut out = Vec::new();
    for i in idx {
        out.push(i);
        cum += w_tilde[i];
        if cum >= eta - 1e-12 {
            break;
        }
    }
    out
}

/// `min_τ τ + (1/(1−η)) Σ w̃ᵢ (vᵢ − τ)₊`, attained at a sample value.
pub fn cvar_value(values: &[f64], w_tilde: &[f64], eta: f64) -> f64 {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let k = 1.0 / (1.0 - eta);
    // At τ = v_(m) only strictly larger values contribute.
    let (mut wsum, mut wvsum) = (0.0, 0.0);
    let mut best = f64::INFINITY;
    for &i in &order {
        let tau = values[i];
        best = best.min(tau + k * (wvsum - tau * wsum));
        wsum += w_tilde[i];
        wvsum += w_tilde[i] * values[i];
    }
    best
}

/// Replaces infeasible costs by the mean over feasible ones. When nothing is
/// feasible every entry becomes `penalty` and the flag is set.
pub fn pad_infeasible(costs: &[(f64, bool)], penalty: f64) -> (Vec<f64>, bool) {
    let feasible: Vec<f64> = costs.iter().filter(|c| c.1).map(|c| c.0).collect();
    if feasible.is_empty() {
        return (vec![penalty; costs.len()], !costs.is_empty());
    }
    let mean = feasible.iter().sum::<f64>() / feasible.len() as f64;
    (costs.iter().map(|&(v, ok)| if ok { v } else { mean }).collect(), false)
}

struct CostFn<'a> {
    p: &'a dyn DecisionProblem,
}

impl SmoothFn for CostFn<'_> {
    fn eval(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.p.dim();
        self.p.cost(&x[..d], &mut grad[..d])
    }
    fn add_hessian(&self, x: &[f64], w: f64, h: &mut DMatrix<f64>) {
        self.p.add_cost_hessian(&x[..self.p.dim()], w, h);
    }
}

/// `c_j(g, θ) − x[τ] − x[s]` with the auxiliaries optional.
struct ConstraintFn<'a> {
    p: &'a dyn DecisionProblem,
    j: usize,
    theta: Vec<f64>,
    aux: Option<(usize, usize)>,
}

impl SmoothFn for ConstraintFn<'_> {
    fn eval(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.p.dim();
        let mut v = self.p.constraint(self.j, &x[..d], &self.theta, &mut grad[..d]);
        if let Some((t, s)) = self.aux {
            v -= x[t] + x[s];
            grad[t] = -1.0;
            grad[s] = -1.0;
        }
        v
    }
    fn add_hessian(&self, x: &[f64], w: f64, h: &mut DMatrix<f64>) {
        self.p.add_constraint_hessian(self.j, &x[..self.p.dim()], &self.theta, w, h);
    }
}

/// `Σ coef_k x[k] + offset`.
struct AffineFn {
    terms: Vec<(usize, f64)>,
    offset: f64,
}

impl SmoothFn for AffineFn {
    fn eval(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let mut v = self.offset;
        for &(k, c) in &self.terms {
            grad[k] += c;
            v += c * x[k];
        }
        v
    }
}

struct Assembled<'a> {
    program: Program<'a>,
    enforced: Vec<Enforced>,
    scenarios: Vec<usize>,
    /// CVaR layout: τ_j at `tau_base + j`, s_ij at `s_index[j][i]`.
    tau_base: usize,
    s_index: Vec<Vec<Option<usize>>>,
    x0: Vec<f64>,
}

fn assemble<'a>(p: &'a dyn DecisionProblem, risk: RiskSpec, post: &WeightedPosterior, tau_scale: f64) -> Result<Assembled<'a>> {
    risk.validate()?;
    if post.is_empty() {
        return Err(Error::InvalidArgument("empty posterior".into()));
    }
    if post.dim() != p.theta_dim() {
        return Err(Error::Shape(format!("posterior θ has {} entries, problem expects {}", post.dim(), p.theta_dim())));
    }
    let d = p.dim();
    let m = p.num_constraints();
    let (lo, hi) = p.bounds();
    let mut ineqs: Vec<Box<dyn SmoothFn + 'a>> = Vec::new();
    let mut enforced = Vec::new();
    let mut scenarios = Vec::new();
    let mut n = d;
    let mut tau_base = d;
    let mut s_index = Vec::new();
    let g0: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect();
    let mut x0 = g0.clone();
    match risk {
        RiskSpec::Mean => {
            let theta_bar = post.mean();
            for j in 0..m {
                ineqs.push(Box::new(ConstraintFn { p, j, theta: theta_bar.clone(), aux: None }));
                enforced.push(Enforced::Mean { j });
            }
        }
        RiskSpec::Chance(eta) => {
            scenarios = select_scenarios(&post.w_tilde, eta);
            for &i in &scenarios {
                for j in 0..m {
                    ineqs.push(Box::new(ConstraintFn { p, j, theta: post.thetas[i].clone(), aux: None }));
                    enforced.push(Enforced::Scenario { j, i });
                }
            }
        }
        RiskSpec::CVaR(eta) => {
            let support: Vec<usize> = (0..post.len()).filter(|&i| post.w_tilde[i] > 0.0).collect();
            tau_base = d;
            n = d + m;
            x0.extend(std::iter::repeat_n(0.0, m));
            s_index = vec![vec![None; post.len()]; m];
            for j in 0..m {
                let tau = tau_base + j;
                let mut bound = vec![(tau, 1.0)];
                let spread = support.iter().fold(0.0f64, |a, &i| a.max(p.constraint_value(j, &g0, &post.thetas[i]).abs()));
                ineqs.push(Box::new(AffineFn { terms: vec![(tau, -1.0)], offset: -tau_scale * (1.0 + spread) }));
                enforced.push(Enforced::TauFloor { j });
                for &i in &support {
                    let s = n;
                    n += 1;
                    s_index[j][i] = Some(s);
                    let c0 = p.constraint_value(j, &g0, &post.thetas[i]);
                    x0.push(c0.max(0.0) + 1.0);
                    ineqs.push(Box::new(ConstraintFn { p, j, theta: post.thetas[i].clone(), aux: Some((tau, s)) }));
                    enforced.push(Enforced::Tail { j, i });
                    ineqs.push(Box::new(AffineFn { terms: vec![(s, -1.0)], offset: 0.0 }));
                    enforced.push(Enforced::SlackNonneg { j, i });
                    bound.push((s, post.w_tilde[i] / (1.0 - eta)));
                }
                ineqs.push(Box::new(AffineFn { terms: bound, offset: 0.0 }));
                enforced.push(Enforced::CvarBound { j });
            }
            scenarios = support;
        }
    }
    for k in 0..d {
        ineqs.push(Box::new(AffineFn { terms: vec![(k, -1.0)], offset: lo[k] }));
        enforced.push(Enforced::Lower { k });
        ineqs.push(Box::new(AffineFn { terms: vec![(k, 1.0)], offset: -hi[k] }));
        enforced.push(Enforced::Upper { k });
    }
    let program = Program { n, objective: Box::new(CostFn { p }), ineqs };
    Ok(Assembled { program, enforced, scenarios, tau_base, s_index, x0 })
}

fn theta_dependent(e: &Enforced) -> bool {
    matches!(e, Enforced::Mean { .. } | Enforced::Scenario { .. } | Enforced::Tail { .. } | Enforced::CvarBound { .. })
}

/// Solves the risk-specified problem. Infeasibility is reported through the
/// `feasible` flag.
pub fn solve(p: &dyn DecisionProblem, risk: RiskSpec, post: &WeightedPosterior) -> Result<DecisionSolution> {
    let mut tau_scale = TAU_FLOOR_SCALE;
    let (a, r) = loop {
        let a = assemble(p, risk, post, tau_scale)?;
        let r = match ipm::solve(&a.program, a.x0.clone(), &IpmSettings::default())? {
            Outcome::Infeasible => return Ok(DecisionSolution::infeasible(risk, a.scenarios)),
            Outcome::Solved(r) => r,
        };
        let floor_active = a
            .enforced
            .iter()
            .zip(&r.lambda)
            .any(|(e, l)| matches!(e, Enforced::TauFloor { .. }) && *l > ACTIVE_TOL);
        if !floor_active || tau_scale > 1e6 {
            break (a, r);
        }
        tau_scale *= 100.0;
    };
    let d = p.dim();
    let m = p.num_constraints();
    let values: Vec<f64> = a.program.ineqs.iter().map(|c| c.value(&r.x)).collect();
    let active_set = (0..r.lambda.len()).filter(|&k| r.lambda[k] > ACTIVE_TOL).collect();
    let degenerate = a
        .enforced
        .iter()
        .enumerate()
        .any(|(k, e)| theta_dependent(e) && r.lambda[k] <= ACTIVE_TOL && values[k].abs() <= ACTIVE_TOL);
    let (tau_star, s_star) = if matches!(risk, RiskSpec::CVaR(_)) {
        let tau = r.x[a.tau_base..a.tau_base + m].to_vec();
        let s = a.s_index.iter().map(|row| row.iter().map(|k| k.map_or(0.0, |k| r.x[k])).collect()).collect();
        (tau, s)
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(DecisionSolution {
        risk,
        feasible: true,
        g_star: r.x[..d].to_vec(),
        j_star: r.objective,
        x: r.x,
        enforced: a.enforced,
        lambda_star: r.lambda,
        tau_star,
        s_star,
        scenarios: a.scenarios,
        active_set,
        degenerate,
        converged: r.converged,
        tau_floor_scale: tau_scale,
    })
}

pub fn solve_mean(p: &dyn DecisionProblem, post: &WeightedPosterior) -> Result<DecisionSolution> {
    solve(p, RiskSpec::Mean, post)
}

pub fn solve_chance(p: &dyn DecisionProblem, post: &WeightedPosterior, eta: f64) -> Result<DecisionSolution> {
    solve(p, RiskSpec::Chance(eta), post)
}

pub fn solve_cvar(p: &dyn DecisionProblem, post: &WeightedPosterior, eta: f64) -> Result<DecisionSolution> {
    solve(p, RiskSpec::CVaR(eta), post)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeGrad {
    /// `∂J*/∂θ⁽ⁱ⁾` for every posterior sample (zero outside the scenario set).
    pub per_sample: Vec<Vec<f64>>,
    /// `∂J*/∂w̃ᵢ` with the samples held fixed. Zero under a chance constraint,
    /// whose dependence on the weights is piecewise constant.
    pub per_weight: Vec<f64>,
    /// Degenerate complementarity at the solution; gradients are unreliable.
    pub degenerate_active_set: bool,
}

/// Envelope sensitivities `∂J*/∂θ⁽ⁱ⁾ = Σ_j μ_ij ∇_θ c_j(g*, θ⁽ⁱ⁾)` with the
/// scenario set and weights held fixed.
pub fn envelope_grad(p: &dyn DecisionProblem, sol: &DecisionSolution, post: &WeightedPosterior) -> Result<EnvelopeGrad> {
    if !sol.feasible {
        return Err(Error::InvalidArgument("envelope gradient of an infeasible solution".into()));
    }
    let dim = p.theta_dim();
    let mut per_sample = vec![vec![0.0; dim]; post.len()];
    let mut per_weight = vec![0.0; post.len()];
    let theta_bar = if sol.risk == RiskSpec::Mean { post.mean() } else { Vec::new() };
    for (e, &lam) in sol.enforced.iter().zip(&sol.lambda_star) {
        match *e {
            Enforced::Mean { j } => {
                let gr = p.constraint_grad_theta(j, &sol.g_star, &theta_bar);
                for (i, row) in per_sample.iter_mut().enumerate() {
                    for k in 0..dim {
                        row[k] += post.w_tilde[i] * lam * gr[k];
                        per_weight[i] += lam * gr[k] * post.thetas[i][k];
                    }
                }
            }
            Enforced::CvarBound { j } => {
                let RiskSpec::CVaR(eta) = sol.risk else { continue };
                for (i, s) in sol.s_star[j].iter().enumerate() {
                    per_weight[i] += lam * s / (1.0 - eta);
                }
            }
            Enforced::Scenario { j, i } | Enforced::Tail { j, i } => {
                let gr = p.constraint_grad_theta(j, &sol.g_star, &post.thetas[i]);
                for k in 0..dim {
                    per_sample[i][k] += lam * gr[k];
                }
            }
            _ => {}
        }
    }
    Ok(EnvelopeGrad { per_sample, per_weight, degenerate_active_set: sol.degenerate })
}

/// Largest KKT violation of `sol` for the program implied by its risk spec:
/// stationarity, primal feasibility, dual sign and complementarity.
pub fn kkt_residual(p: &dyn DecisionProblem, sol: &DecisionSolution, post: &WeightedPosterior) -> Result<f64> {
    if !sol.feasible {
        return Ok(f64::INFINITY);
    }
    let a = assemble(p, sol.risk, post, sol.tau_floor_scale)?;
    let n = a.program.n;
    if sol.x.len() != n || sol.lambda_star.len() != a.program.ineqs.len() {
        return Err(Error::Shape("solution does not match the assembled program".into()));
    }
    let mut grad = vec![0.0; n];
    a.program.objective.eval(&sol.x, &mut grad);
    let mut worst: f64 = 0.0;
    for (c, &lam) in a.program.ineqs.iter().zip(&sol.lambda_star) {
        let mut gc = vec![0.0; n];
        let v = c.eval(&sol.x, &mut gc);
        for k in 0..n {
            grad[k] += lam * gc[k];
        }
        worst = worst.max(v.max(0.0)).max((-lam).max(0.0)).max((lam * v).abs());
    }
    Ok(grad.iter().fold(worst, |w, g| w.max(g.abs())))
}

/// Whether `g` satisfies the risk-specified constraints, judged directly on
/// the samples.
pub fn risk_feasible(p: &dyn DecisionProblem, risk: RiskSpec, post: &WeightedPosterior, scenarios: &[usize], g: &[f64]) -> bool {
    let m = p.num_constraints();
    match risk {
        RiskSpec::Mean => {
            let tb = post.mean();
            (0..m).all(|j| p.constraint_value(j, g, &tb) <= 0.0)
        }
        RiskSpec::Chance(_) => scenarios.iter().all(|&i| (0..m).all(|j| p.constraint_value(j, g, &post.thetas[i]) <= 0.0)),
        RiskSpec::CVaR(eta) => (0..m).all(|j| {
            let vals: Vec<f64> = post.thetas.iter().map(|t| p.constraint_value(j, g, t)).collect();
            cvar_value(&vals, &post.w_tilde, eta) <= 0.0
        }),
    }
}

/// Dense grid search with two zoom refinements; returns the best feasible
/// `(g, J)` found, if any.
pub fn grid_search(p: &dyn DecisionProblem, risk: RiskSpec, post: &WeightedPosterior, per_dim: usize) -> Option<(Vec<f64>, f64)> {
    let d = p.dim();
    let scenarios = match risk {
        RiskSpec::Chance(eta) => select_scenarios(&post.w_tilde, eta),
        _ => Vec::new(),
    };
    let (mut lo, mut hi) = p.bounds();
    let (blo, bhi) = (lo.clone(), hi.clone());
    let mut best: Option<(Vec<f64>, f64)> = None;
    for _ in 0..3 {
        let total = per_dim.pow(d as u32);
        let mut g = vec![0.0; d];
        for flat in 0..total {
            let mut r = flat;
            for k in 0..d {
                let idx = r % per_dim;
                r /= per_dim;
                g[k] = lo[k] + (hi[k] - lo[k]) * idx as f64 / (per_dim - 1) as f64;
            }
            let j = p.cost_value(&g);
            if best.as_ref().is_some_and(|b| b.1 <= j) {
                continue;
            }
            if risk_feasible(p, risk, post, &scenarios, &g) {
                best = Some((g.clone(), j));
            }
        }
        let (center, _) = best.as_ref()?;
        for k in 0..d {
            let step = 2.0 * (hi[k] - lo[k]) / (per_dim - 1) as f64;
            lo[k] = (center[k] - step).max(blo[k]);
            hi[k] = (center[k] + step).min(bhi[k]);
        }
    }
    best
}
