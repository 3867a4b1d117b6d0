//! Log-barrier interior-point method for small smooth convex programs
//! `min f0(x)  s.t.  f_i(x) ≤ 0`, with a phase-I search for a strictly
//! feasible start. Dual estimates are `λ_i = −1/(t f_i)` at each center.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Smooth convex function with sparse gradient support.
pub trait SmoothFn: Send + Sync {
    /// Value, with the gradient written into `grad` (length `n`, pre-zeroed).
    fn eval(&self, x: &[f64], grad: &mut [f64]) -> f64;
    /// Adds `w · ∇²f(x)` into `h`.
    fn add_hessian(&self, _x: &[f64], _w: f64, _h: &mut DMatrix<f64>) {}
    fn value(&self, x: &[f64]) -> f64 {
        let mut g = vec![0.0; x.len()];
        self.eval(x, &mut g)
    }
}

pub struct Program<'a> {
    pub n: usize,
    pub objective: Box<dyn SmoothFn + 'a>,
    pub ineqs: Vec<Box<dyn SmoothFn + 'a>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IpmSettings {
    /// Barrier parameter growth factor.
    pub mu: f64,
    /// Target complementarity `λ_i·(−f_i) = 1/t`. Pushing `t` further only
    /// amplifies roundoff in `λ = −1/(t f)`.
    pub gap_tol: f64,
    /// Centering stops once `‖∇f0 + Σ λ_i ∇f_i‖∞` falls below this.
    pub center_tol: f64,
    pub max_newton: usize,
}

impl Default for IpmSettings {
    fn default() -> Self {
        Self { mu: 10.0, gap_tol: 1e-8, center_tol: 1e-10, max_newton: 400 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IpmResult {
    pub x: Vec<f64>,
    pub lambda: Vec<f64>,
    pub objective: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Solved(IpmResult),
    Infeasible,
}

struct Eval {
    f: Vec<f64>,
    grads: Vec<Vec<f64>>,
    f0: f64,
    g0: Vec<f64>,
}

fn evaluate(p: &Program, x: &[f64]) -> Eval {
    let mut g0 = vec![0.0; p.n];
    let f0 = p.objective.eval(x, &mut g0);
    let mut f = Vec::with_capacity(p.ineqs.len());
    let mut grads = Vec::with_capacity(p.ineqs.len());
    for c in &p.ineqs {
        let mut g = vec![0.0; p.n];
        f.push(c.eval(x, &mut g));
        grads.push(g);
    }
    Eval { f, grads, f0, g0 }
}

/// `t f0 − Σ log(−f_i)`, or `+∞` outside the strict interior.
fn barrier_value(p: &Program, x: &[f64], t: f64) -> f64 {
    let mut v = t * p.objective.value(x);
    for c in &p.ineqs {
        let f = c.value(x);
        if !(f < 0.0) {
            return f64::INFINITY;
        }
        v -= (-f).ln();
    }
    v
}

fn solve_spd(h: DMatrix<f64>, rhs: DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = h.clone().cholesky() {
        return Some(ch.solve(&rhs));
    }
    let scale = h.diagonal().iter().fold(0.0f64, |a, b| a.max(b.abs())).max(1.0);
    let mut reg = 1e-14 * scale;
    for _ in 0..8 {
        let hr = &h + DMatrix::identity(h.nrows(), h.ncols()) * reg;
        if let Some(ch) = hr.cholesky() {
            return Some(ch.solve(&rhs));
        }
        reg *= 100.0;
    }
    h.lu().solve(&rhs)
}

/// Newton step for the barrier objective at `t`; returns the step, half the
/// squared Newton decrement and the dual residual `‖∇ψ‖∞ / t`.
fn newton_step(p: &Program, x: &[f64], e: &Eval, t: f64) -> Result<(DVector<f64>, f64, f64)> {
    let n = p.n;
    let mut h = DMatrix::<f64>::zeros(n, n);
    p.objective.add_hessian(x, t, &mut h);
    let mut grad = DVector::<f64>::from_vec(e.g0.iter().map(|g| t * g).collect());
    for (i, c) in p.ineqs.iter().enumerate() {
        let inv = 1.0 / -e.f[i];
        c.add_hessian(x, inv, &mut h);
        let gi = &e.grads[i];
        let nz: Vec<usize> = (0..n).filter(|&k| gi[k] != 0.0).collect();
        for &a in &nz {
            for &b in &nz {
                h[(a, b)] += inv * inv * gi[a] * gi[b];
            }
            grad[a] += inv * gi[a];
        }
    }
    let dx = solve_spd(h, -&grad).ok_or_else(|| Error::Numerical("singular Newton system".into()))?;
    if dx.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite Newton step".into()));
    }
    let dec = -0.5 * grad.dot(&dx);
    Ok((dx, dec, grad.amax() / t))
}

/// Barrier path following from a strictly feasible `x0`. `stop` is checked
/// after each centering and may end the run early.
fn barrier(p: &Program, x0: Vec<f64>, settings: &IpmSettings, stop: &dyn Fn(&[f64], f64) -> bool) -> Result<IpmResult> {
    let m = p.ineqs.len();
    if m == 0 {
        return Err(Error::InvalidArgument("program without inequality constraints".into()));
    }
    let mut x = x0;
    if p.ineqs.iter().any(|c| !(c.value(&x) < 0.0)) {
        return Err(Error::Numerical("interior-point start is not strictly feasible".into()));
    }
    let mut t = 1.0;
    let mut newton_left = settings.max_newton;
    let mut converged = false;
    loop {
        // Centering: damped Newton, then pure Newton steps once inside the
        // quadratic region until the decrement stops shrinking.
        let mut prev_dec = f64::INFINITY;
        while newton_left > 0 {
            newton_left -= 1;
            let e = evaluate(p, &x);
            let (dx, dec, resid) = newton_step(p, &x, &e, t)?;
            if resid <= settings.center_tol || (dec < 1e-12 && dec > 0.25 * prev_dec) {
                break;
            }
            prev_dec = dec;
            let psi0 = barrier_value(p, &x, t);
            let mut s = 1.0;
            let mut moved = false;
            for _ in 0..60 {
                let xn: Vec<f64> = x.iter().zip(dx.iter()).map(|(a, b)| a + s * b).collect();
                let psi = barrier_value(p, &xn, t);
                if psi.is_finite() && (dec < 0.1 || psi <= psi0 - 0.02 * s * dec) {
                    x = xn;
                    moved = true;
                    break;
                }
                s *= 0.5;
            }
            if !moved {
                break;
            }
        }
        if 1.0 / t <= settings.gap_tol {
            converged = newton_left > 0;
            break;
        }
        if stop(&x, t) || newton_left == 0 {
            break;
        }
        t *= settings.mu;
    }
    let e = evaluate(p, &x);
    let lambda: Vec<f64> = e.f.iter().map(|f| -1.0 / (t * f)).collect();
    if converged {
        if let Some((xp, lp)) = polish(p, &x, &lambda, t) {
            let f0 = p.objective.value(&xp);
            return Ok(IpmResult { x: xp, lambda: lp, objective: f0, converged });
        }
    }
    Ok(IpmResult { x, lambda, objective: e.f0, converged })
}

/// Newton on the KKT equalities of the apparent active set
/// (`λ_i > 1/√t`). Returns `None` unless the result is feasible with
/// nonnegative multipliers and a smaller KKT residual.
fn polish(p: &Program, x0: &[f64], lambda0: &[f64], t: f64) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = p.n;
    let cut = 1.0 / t.sqrt();
    let active: Vec<usize> = (0..lambda0.len()).filter(|&i| lambda0[i] > cut).collect();
    let k = active.len();
    if k > n {
        return None;
    }
    let mut x = x0.to_vec();
    let mut lam: Vec<f64> = active.iter().map(|&i| lambda0[i]).collect();
    let mut last = f64::INFINITY;
    for _ in 0..20 {
        let e = evaluate(p, &x);
        let mut r = DVector::<f64>::zeros(n + k);
        let mut jac = DMatrix::<f64>::zeros(n + k, n + k);
        p.objective.add_hessian(&x, 1.0, &mut jac);
        for a in 0..n {
            r[a] = e.g0[a];
        }
        for (q, &i) in active.iter().enumerate() {
            p.ineqs[i].add_hessian(&x, lam[q], &mut jac);
            for a in 0..n {
                r[a] += lam[q] * e.grads[i][a];
                jac[(a, n + q)] = e.grads[i][a];
                jac[(n + q, a)] = e.grads[i][a];
            }
            r[n + q] = e.f[i];
        }
        let norm = r.amax();
        if norm <= 1e-14 || norm >= last {
            break;
        }
        last = norm;
        let step = jac.lu().solve(&(-r))?;
        if step.iter().any(|v| !v.is_finite()) {
            return None;
        }
        for a in 0..n {
            x[a] += step[a];
        }
        for q in 0..k {
            lam[q] += step[n + q];
        }
    }
    let e = evaluate(p, &x);
    if lam.iter().any(|l| *l < 0.0) || e.f.iter().any(|f| *f > 1e-13) {
        return None;
    }
    let mut lambda = vec![0.0; lambda0.len()];
    for (q, &i) in active.iter().enumerate() {
        lambda[i] = lam[q];
    }
    let stationarity = |x: &[f64], l: &[f64]| -> f64 {
        let e = evaluate(p, x);
        let mut g = e.g0.clone();
        for (li, gi) in l.iter().zip(&e.grads) {
            for a in 0..n {
                g[a] += li * gi[a];
            }
        }
        let comp = l.iter().zip(&e.f).fold(0.0f64, |m, (l, f)| m.max((l * f).abs()));
        g.iter().fold(comp, |m, v| m.max(v.abs()))
    };
    (stationarity(&x, &lambda) < stationarity(x0, lambda0)).then_some((x, lambda))
}

struct PhaseOne<'a, 'b> {
    inner: &'b dyn SmoothFn,
    _p: std::marker::PhantomData<&'a ()>,
}

impl SmoothFn for PhaseOne<'_, '_> {
    fn eval(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let n = x.len() - 1;
        let v = self.inner.eval(&x[..n], &mut grad[..n]);
        grad[n] = -1.0;
        v - x[n]
    }
    fn add_hessian(&self, x: &[f64], w: f64, h: &mut DMatrix<f64>) {
        // The slack enters linearly, so the inner Hessian fills the leading block.
        self.inner.add_hessian(&x[..x.len() - 1], w, h);
    }
}

struct LastCoordinate;

impl SmoothFn for LastCoordinate {
    fn eval(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        grad[x.len() - 1] = 1.0;
        x[x.len() - 1]
    }
}

/// Keeps the phase-I slack bounded below so the auxiliary problem has a minimizer.
struct SlackFloor(f64);

impl SmoothFn for SlackFloor {
    fn eval(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        grad[x.len() - 1] = -1.0;
        self.0 - x[x.len() - 1]
    }
}

/// Solves the program from a (possibly infeasible) guess `x0`.
pub fn solve(p: &Program, x0: Vec<f64>, settings: &IpmSettings) -> Result<Outcome> {
    let f0: Vec<f64> = p.ineqs.iter().map(|c| c.value(&x0)).collect();
    if f0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("constraint not finite at the initial point".into()));
    }
    let worst = f0.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let start = if worst < 0.0 {
        x0
    } else {
        let mut ineqs: Vec<Box<dyn SmoothFn + '_>> = p
            .ineqs
            .iter()
            .map(|c| Box::new(PhaseOne { inner: c.as_ref(), _p: std::marker::PhantomData }) as Box<dyn SmoothFn>)
            .collect();
        let floor = -1.0 - worst.abs();
        ineqs.push(Box::new(SlackFloor(floor)));
        let aux = Program { n: p.n + 1, objective: Box::new(LastCoordinate), ineqs };
        let mut z = x0.clone();
        z.push(worst + 1.0);
        let n = p.n;
        let m = aux.ineqs.len() as f64;
        // Stop at the first center with negative slack (centers keep a margin
        // from every constraint), or once the center certifies a positive
        // optimal slack: at a center the optimum is at least `slack − m/t`.
        let res = barrier(&aux, z, settings, &|z: &[f64], t: f64| z[n] < 0.0 || z[n] > 2.0 * m / t)?;
        let slack = res.x[n];
        let x1 = res.x[..n].to_vec();
        let strictly = p.ineqs.iter().all(|c| c.value(&x1) < 0.0);
        if slack >= -1e-12 || !strictly {
            return Ok(Outcome::Infeasible);
        }
        x1
    };
    Ok(Outcome::Solved(barrier(p, start, settings, &|_, _| false)?))
}
