//! Cross-module oracle checks shared by the `selftest` command and the
//! acceptance tests. Each check returns its worst observed error so callers
//! pick the tolerance.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::amortizer::{EncoderWeights, HeadBounds, PARAM_NAMES};
use crate::autodiff::{Tape, Tensor};
use crate::decision::{envelope_grad, grid_search, solve, DecisionProblem, DoseProblem, LinearThresholdProblem, QuarantineProblem, RiskSpec};
use crate::design::{eig_nmc, null_space_check, projector, synthetic_posterior, Budgets};
use crate::error::Result;
use crate::models::siqr::{lambda_max_2x2, SiqrParams};
use crate::models::{ForwardModel, LinearGaussian, SiqrConfig, SiqrModel};
use crate::prob::{RandomStream, WeightedPosterior};

fn posterior(thetas: Vec<Vec<f64>>, w: Vec<f64>) -> WeightedPosterior {
    let s: f64 = w.iter().sum();
    WeightedPosterior::from_samples(thetas, w.into_iter().map(|x| x / s).collect())
}

/// Posterior of `n` SIQR rate vectors scattered around `(0.5, 0.8, 0.2, 0.2)`.
pub fn random_siqr_posterior(rng: &mut ChaCha8Rng, n: usize) -> WeightedPosterior {
    let med = [0.5, 0.8, 0.2, 0.2];
    let thetas = (0..n).map(|_| med.iter().map(|m| m * rng.random_range(-0.3..0.3f64).exp()).collect()).collect();
    posterior(thetas, (0..n).map(|_| rng.random_range(0.05..1.0)).collect())
}

/// Posterior of `n` PK parameter vectors scattered around `(1, 0.1, 20)`.
pub fn random_pk_posterior(rng: &mut ChaCha8Rng, n: usize) -> WeightedPosterior {
    let med = [1.0, 0.1, 20.0];
    let thetas = (0..n).map(|_| med.iter().map(|m| m * rng.random_range(-0.2..0.2f64).exp()).collect()).collect();
    posterior(thetas, (0..n).map(|_| rng.random_range(0.05..1.0)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverCheck {
    /// Largest `|J*_solver − J*_grid|` over feasible instances.
    pub max_gap: f64,
    /// Instances where the solver and grid disagree on feasibility.
    pub feasibility_mismatches: usize,
    pub solves: usize,
}

/// Chance and CVaR optima against dense grid search on random quarantine and
/// dose instances (`instances` of each).
pub fn solver_vs_grid(instances: usize, per_dim: usize, seed: u64) -> Result<SolverCheck> {
    let mut rng = RandomStream::new(seed).rng();
    let mut out = SolverCheck { max_gap: 0.0, feasibility_mismatches: 0, solves: 0 };
    for _ in 0..instances {
        let eps = rng.random_range(0.1..0.3);
        let s0 = rng.random_range(0.9..0.99);
        let q = QuarantineProblem::standard(eps, s0)?;
        let d = DoseProblem::new(1.0, 400.0, rng.random_range(10.0..14.0), rng.random_range(100.0..140.0))?;
        let n = rng.random_range(3..12);
        let eta = rng.random_range(0.5..0.95);
        let pq = random_siqr_posterior(&mut rng, n);
        let pd = random_pk_posterior(&mut rng, n);
        for risk in [RiskSpec::Chance(eta), RiskSpec::CVaR(eta)] {
            for (p, post) in [(&q as &dyn DecisionProblem, &pq), (&d as &dyn DecisionProblem, &pd)] {
                let s = solve(p, risk, post)?;
                out.solves += 1;
                match grid_search(p, risk, post, per_dim) {
                    Some((_, jg)) if s.feasible => out.max_gap = out.max_gap.max((s.j_star - jg).abs()),
                    None if !s.feasible => {}
                    _ => out.feasibility_mismatches += 1,
                }
            }
        }
    }
    Ok(out)
}

/// Worst relative error `‖g_fd − g‖∞ / ‖g‖∞` of reverse-mode gradients of a
/// random scalar readout of random encoders, with respect to the input row
/// and to every weight tensor.
pub fn autodiff_vs_fd(networks: usize, h: f64, seed: u64) -> Result<f64> {
    let model = SiqrModel::new(SiqrConfig::default())?;
    let mut rng = RandomStream::new(seed).rng();
    let mut worst: f64 = 0.0;
    for k in 0..networks {
        let mut phi = EncoderWeights::init(&model, HeadBounds::for_prior(model.prior()), vec![0.0; 2], vec![1.0; 2], seed ^ k as u64)?;
        // Larger heads so the readout depends on every layer.
        for idx in 4..8 {
            phi.params[idx].data.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        let d = phi.theta_dim();
        let r_mu: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r_sigma: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..phi.input_dim()).map(|_| rng.random_range(-1.5..1.5)).collect();
        let readout = |phi: &EncoderWeights, x: &[f64], grads: bool| -> Result<(f64, Vec<Tensor>)> {
            let mut tape = Tape::new();
            let xv = tape.input("x", Tensor::row(x.to_vec()));
            let (mu, sigma) = phi.forward(&mut tape, xv)?;
            let a = tape.constant(Tensor::row(r_mu.clone()));
            let b = tape.constant(Tensor::row(r_sigma.clone()));
            let m = tape.mul(mu, a)?;
            let s = tape.mul(sigma, b)?;
            let t = tape.add(m, s)?;
            let out = tape.sum(t);
            let value = tape.value(out).data[0];
            if !grads {
                return Ok((value, Vec::new()));
            }
            let g = tape.backward(out)?;
            let mut all = vec![g.get("x").expect("input").clone()];
            all.extend(PARAM_NAMES.iter().map(|n| g.get(n).expect("weight").clone()));
            Ok((value, all))
        };
        let (_, grads) = readout(&phi, &x, true)?;
        // Input row: every coordinate.
        let mut fd = Vec::new();
        let mut ad = Vec::new();
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            fd.push((readout(&phi, &xp, false)?.0 - readout(&phi, &xm, false)?.0) / (2.0 * h));
            ad.push(grads[0].data[i]);
        }
        // Weights: a few random coordinates of each tensor.
        for t in 0..PARAM_NAMES.len() {
            for _ in 0..4 {
                let i = rng.random_range(0..phi.params[t].data.len());
                let (mut pp, mut pm) = (phi.clone(), phi.clone());
                pp.params[t].data[i] += h;
                pm.params[t].data[i] -= h;
                fd.push((readout(&pp, &x, false)?.0 - readout(&pm, &x, false)?.0) / (2.0 * h));
                ad.push(grads[t + 1].data[i]);
            }
        }
        let scale = ad.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        let err = fd.iter().zip(&ad).fold(0.0f64, |m, (f, a)| m.max((f - a).abs())) / scale;
        worst = worst.max(err);
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeCheck {
    /// Worst `‖fd − env‖∞ / ‖fd‖∞` over accepted instances.
    pub max_rel_err: f64,
    pub accepted: usize,
    /// Instances skipped for a weakly active or degenerate active set.
    pub skipped: usize,
}

/// Envelope gradients `∂J*/∂θᵢ` against central differences of re-solved
/// optima, on instances whose active multipliers are bounded away from zero.
pub fn envelope_vs_fd(instances: usize, h: f64, seed: u64) -> Result<EnvelopeCheck> {
    let mut rng = RandomStream::new(seed).rng();
    let mut out = EnvelopeCheck { max_rel_err: 0.0, accepted: 0, skipped: 0 };
    let q = QuarantineProblem::standard(0.2, 0.98)?;
    let d = DoseProblem::new(1.0, 400.0, 12.0, 120.0)?;
    for k in 0..instances {
        let n = rng.random_range(2..6);
        let eta = rng.random_range(0.6..0.95);
        let risk = if k % 2 == 0 { RiskSpec::Chance(eta) } else { RiskSpec::CVaR(eta) };
        let (p, post): (&dyn DecisionProblem, WeightedPosterior) =
            if k % 4 < 2 { (&q, random_siqr_posterior(&mut rng, n)) } else { (&d, random_pk_posterior(&mut rng, n)) };
        let s = solve(p, risk, &post)?;
        if !s.feasible {
            out.skipped += 1;
            continue;
        }
        let env = envelope_grad(p, &s, &post)?;
        let strict = s.active_set.iter().all(|&a| s.lambda_star[a] > 1e-4);
        if env.degenerate_active_set || !strict {
            out.skipped += 1;
            continue;
        }
        let mut fd = Vec::new();
        let mut an = Vec::new();
        for i in 0..post.len() {
            for kk in 0..post.dim() {
                let step = h * post.thetas[i][kk].abs().max(1.0);
                let (mut a, mut b) = (post.clone(), post.clone());
                a.thetas[i][kk] += step;
                b.thetas[i][kk] -= step;
                let (sa, sb) = (solve(p, risk, &a)?, solve(p, risk, &b)?);
                fd.push((sa.j_star - sb.j_star) / (2.0 * step));
                an.push(env.per_sample[i][kk]);
            }
        }
        let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            out.skipped += 1;
            continue;
        }
        let err = fd.iter().zip(&an).fold(0.0f64, |m, (f, a)| m.max((f - a).abs())) / scale;
        out.max_rel_err = out.max_rel_err.max(err);
        out.accepted += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NullSpaceCase {
    pub theta_dim: usize,
    pub rank: usize,
    pub risk: RiskSpec,
    /// Constraint direction inside the projector range.
    pub leakage: f64,
    /// Constraint direction with a component outside the range.
    pub control_leakage: f64,
}

/// Random projectors `P*` of rank `< d` with threshold constraints whose
/// θ-direction lies in `range(P*)`, plus a control that leaves it.
pub fn null_space_suite(instances: usize, stream: RandomStream) -> Result<Vec<NullSpaceCase>> {
    let mut cases = Vec::with_capacity(instances);
    for k in 0..instances {
        let s = stream.split(k as u64);
        let mut rng = s.split(0).rng();
        let d = rng.random_range(2..=5);
        let rank = rng.random_range(1..d);
        let basis: Vec<Vec<f64>> = (0..rank).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let p = projector(&basis, d);
        let a0: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let inside: Vec<f64> = (0..d).map(|r| (0..d).map(|c| p[r][c] * a0[c]).sum()).collect();
        // Control: add the normalized complement of a fresh direction.
        let b: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pb: Vec<f64> = (0..d).map(|r| (0..d).map(|c| p[r][c] * b[c]).sum()).collect();
        let comp: Vec<f64> = b.iter().zip(&pb).map(|(x, y)| x - y).collect();
        let cn = comp.iter().map(|v| v * v).sum::<f64>().sqrt();
        let outside: Vec<f64> = inside.iter().zip(&comp).map(|(a, c)| a + c / cn).collect();
        let post = synthetic_posterior(d, rng.random_range(1..=2), rng.random_range(4..16), s.split(1));
        let risk = [RiskSpec::Mean, RiskSpec::Chance(0.8), RiskSpec::CVaR(0.7)][k % 3];
        let leak = |a: Vec<f64>| -> Result<f64> {
            let prob = LinearThresholdProblem { a, lo: -20.0, hi: 20.0 };
            Ok(null_space_check(&prob, risk, &p, &post)?.leakage)
        };
        cases.push(NullSpaceCase { theta_dim: d, rank, risk, leakage: leak(inside)?, control_leakage: leak(outside)? });
    }
    Ok(cases)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenCheck {
    /// Closed-form `λmax` against shifted power iteration.
    pub max_lambda_err: f64,
    /// Eigenvector derivative formula `∂λ/∂Mᵢⱼ = vᵢuⱼ/(vᵀu)` against central differences.
    pub max_derivative_err: f64,
    /// Quarantine constraint closed form against the generic 2×2 routine.
    pub max_constraint_err: f64,
}

fn power_iteration(m: [[f64; 2]; 2]) -> f64 {
    // Shift so every eigenvalue is positive and the largest dominates.
    let shift = m.iter().flatten().map(|v| v.abs()).sum::<f64>() + 1.0;
    let a = [[m[0][0] + shift, m[0][1]], [m[1][0], m[1][1] + shift]];
    let mut x = [1.0, 1.0];
    let mut lam = 0.0;
    for _ in 0..200_000 {
        let y = [a[0][0] * x[0] + a[0][1] * x[1], a[1][0] * x[0] + a[1][1] * x[1]];
        let n = y[0].hypot(y[1]);
        let next = [y[0] / n, y[1] / n];
        let ay = [a[0][0] * next[0] + a[0][1] * next[1], a[1][0] * next[0] + a[1][1] * next[1]];
        let rq = next[0] * ay[0] + next[1] * ay[1];
        let done = (rq - lam).abs() <= 1e-15 * rq.abs() && (next[0] - x[0]).abs() + (next[1] - x[1]).abs() < 1e-14;
        x = next;
        lam = rq;
        if done {
            break;
        }
    }
    lam - shift
}

/// Random SIQR infected-block matrices under random controls.
pub fn eigen_structure(systems: usize, seed: u64) -> Result<EigenCheck> {
    let mut rng = RandomStream::new(seed).rng();
    let mut out = EigenCheck { max_lambda_err: 0.0, max_derivative_err: 0.0, max_constraint_err: 0.0 };
    for _ in 0..systems {
        let eps = rng.random_range(0.1..0.3);
        let s0 = rng.random_range(0.9..0.99);
        let theta = [rng.random_range(0.2..1.0), rng.random_range(0.3..1.5), rng.random_range(0.1..0.4), rng.random_range(0.1..0.4)];
        let g = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        let params = SiqrParams::new(theta[0], theta[1], theta[2], theta[3], eps, s0)?;
        let m = params.system_matrix(g[0], g[1]);
        let (lam, v, u) = lambda_max_2x2(m)?;
        out.max_lambda_err = out.max_lambda_err.max((lam - power_iteration(m)).abs());
        let vu = v[0] * u[0] + v[1] * u[1];
        let h = 1e-6;
        for r in 0..2 {
            for c in 0..2 {
                let (mut mp, mut mm) = (m, m);
                mp[r][c] += h;
                mm[r][c] -= h;
                let fd = (lambda_max_2x2(mp)?.0 - lambda_max_2x2(mm)?.0) / (2.0 * h);
                out.max_derivative_err = out.max_derivative_err.max((fd - v[r] * u[c] / vu).abs());
            }
        }
        let q = QuarantineProblem::standard(eps, s0)?;
        out.max_constraint_err = out.max_constraint_err.max((q.lambda_max(&g, &theta) - lam).abs());
    }
    Ok(out)
}

/// Worst standardized error `|EIG_nmc − ½ln(1+ξ²)| / stderr` over the
/// linear-Gaussian oracle designs.
pub fn eig_oracle(budgets: &Budgets, seed: u64) -> Result<f64> {
    let m = LinearGaussian::standard();
    let mut worst: f64 = 0.0;
    for (k, xi) in m.design_grid().into_iter().enumerate() {
        let (v, se) = eig_nmc(&m, &xi, budgets, RandomStream::new(seed).split(k as u64))?;
        let truth = m.eig(xi[0]);
        let z = if se > 0.0 { (v - truth).abs() / se } else if (v - truth).abs() < 1e-12 { 0.0 } else { f64::INFINITY };
        worst = worst.max(z);
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Reduced-size oracle suite run by `selftest`.
pub fn selftest(seed: u64) -> Vec<CheckLine> {
    let mut lines = Vec::new();
    let mut push = |name: &'static str, r: Result<(bool, String)>| {
        let (passed, detail) = r.unwrap_or_else(|e| (false, format!("error: {e}")));
        lines.push(CheckLine { name, passed, detail });
    };
    push(
        "eig-oracle",
        eig_oracle(&Budgets { n_outer_eig: 1000, n_inner_eig: 200, ..Budgets::default() }, seed).map(|z| (z <= 3.0, format!("max |z| = {z:.3}"))),
    );
    push(
        "solver-vs-grid",
        solver_vs_grid(5, 400, seed).map(|c| (c.max_gap <= 1e-3 && c.feasibility_mismatches == 0, format!("{c:?}"))),
    );
    push("autodiff-vs-fd", autodiff_vs_fd(5, 1e-5, seed).map(|e| (e <= 1e-5, format!("max rel err {e:.3e}"))));
    push(
        "envelope-vs-fd",
        envelope_vs_fd(12, 1e-6, seed).map(|c| (c.accepted > 0 && c.max_rel_err <= 1e-3, format!("{c:?}"))),
    );
    push(
        "null-space-leakage",
        null_space_suite(30, RandomStream::new(seed)).map(|cs| {
            let worst = cs.iter().map(|c| c.leakage).fold(0.0, f64::max);
            let weakest = cs.iter().map(|c| c.control_leakage).fold(f64::INFINITY, f64::min);
            (worst <= 1e-12 && weakest > 0.0, format!("max leakage {worst:.2e}, min control leakage {weakest:.2e}"))
        }),
    );
    push(
        "eigen-structure",
        eigen_structure(20, seed).map(|c| {
            (c.max_lambda_err <= 1e-6 && c.max_derivative_err <= 1e-6 && c.max_constraint_err <= 1e-6, format!("{c:?}"))
        }),
    );
    lines
}
