use rand::Rng;
use rayon::prelude::*;

use super::{prior_predictive_stats, EncoderWeights, HeadBounds, VariationalParams, PARAM_NAMES};
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::models::ForwardModel;
use crate::prob::{kahan_sum, mean_stderr, reparam_sample, standard_normals, FamilyKind, RandomStream};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Number of gradient steps, each on a freshly simulated minibatch.
    pub epochs: usize,
    /// `(ξ, y)` pairs per step.
    pub outer_batch: usize,
    /// Reparameterized posterior samples per pair.
    pub inner_samples: usize,
    pub seed: u64,
    /// Held-out ELBO is recorded every `eval_every` epochs.
    pub eval_every: usize,
    pub eval_pairs: usize,
    /// Prior-predictive simulations used to fit the input standardization.
    pub standardize_sims: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning rate must be finite and nonnegative".into()));
        }
        if self.epochs == 0 || self.outer_batch == 0 || self.inner_samples == 0 || self.eval_every == 0 {
            return Err(Error::InvalidArgument("epochs, batch sizes and eval_every must be positive".into()));
        }
        if self.eval_pairs == 0 || self.standardize_sims < 2 {
            return Err(Error::InvalidArgument("evaluation and standardization need samples".into()));
        }
        Ok(())
    }
}

/// Per-epoch minibatch ELBO and the held-out ELBO at evaluation epochs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingRecord {
    pub epoch_elbo: Vec<f64>,
    pub eval_epochs: Vec<usize>,
    pub eval_elbo: Vec<f64>,
    /// Pairs whose likelihood could not be evaluated and were left out of a step.
    pub skipped_pairs: usize,
}

impl TrainingRecord {
    /// Means of consecutive windows of `width` minibatch ELBO values, with the
    /// standard error of each window mean.
    pub fn smoothed(&self, width: usize) -> Vec<(f64, f64)> {
        self.epoch_elbo.chunks(width).filter(|c| c.len() == width).map(mean_stderr).collect()
    }
}

/// ELBO estimate and its gradient in `(μ, σ)` for one pair at fixed base noise.
///
/// With `z = μ + σ ε` and `θ = T(z)`, the log-ratio `log p(θ) − log q(θ)` equals
/// `Σ_k ln σ_k − ½((z_k − μ_p,k)/σ_p,k)² + ½ε_k²` up to a constant for both
/// families, so the pathwise derivatives are available in closed form given
/// the likelihood gradient.
pub(crate) fn pair_elbo(
    model: &dyn ForwardModel,
    kind: FamilyKind,
    vp: &VariationalParams,
    xi: &[f64],
    y: &[f64],
    eps: &[Vec<f64>],
    with_grad: bool,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let q = vp.family(kind)?;
    let prior = model.prior();
    let (pm, ps) = (prior.mu(), prior.sigma());
    let d = q.dim();
    let mut values = Vec::with_capacity(eps.len());
    let mut gmu = vec![0.0; d];
    let mut gsigma = vec![0.0; d];
    for e in eps {
        let theta = reparam_sample(&q, e)?;
        let (ll, grad) = if with_grad {
            model.loglik_grad(y, &theta, xi)?
        } else {
            (model.loglik(y, &theta, xi)?, Vec::new())
        };
        let value = ll + prior.log_density(&theta) - q.log_density(&theta);
        if !value.is_finite() {
            return Err(Error::NonFiniteElbo);
        }
        values.push(value);
        if with_grad {
            for k in 0..d {
                let z = vp.mu[k] + vp.sigma[k] * e[k];
                let dll_dz = if kind == FamilyKind::LogNormal { grad[k] * theta[k] } else { grad[k] };
                let dz = dll_dz - (z - pm[k]) / (ps[k] * ps[k]);
                if !dz.is_finite() {
                    return Err(Error::NonFiniteElbo);
                }
                gmu[k] += dz;
                gsigma[k] += e[k] * dz + 1.0 / vp.sigma[k];
            }
        }
    }
    let s = eps.len() as f64;
    gmu.iter_mut().for_each(|g| *g /= s);
    gsigma.iter_mut().for_each(|g| *g /= s);
    Ok((kahan_sum(values) / s, gmu, gsigma))
}

/// Batch ELBO and gradient in the encoder weights at fixed base noise
/// `eps[b][s]`. Pairs whose likelihood fails are excluded from both and
/// counted in the third return value.
pub fn elbo_with_noise(
    phi: &EncoderWeights,
    model: &dyn ForwardModel,
    pairs: &[(Vec<f64>, Vec<f64>)],
    eps: &[Vec<Vec<f64>>],
) -> Result<(f64, Vec<Tensor>, usize)> {
    if pairs.is_empty() || pairs.len() != eps.len() || eps.iter().any(|e| e.is_empty()) {
        return Err(Error::InvalidArgument("ELBO needs a nonempty batch with at least one sample per pair".into()));
    }
    let rows: Vec<Vec<f64>> = pairs.iter().map(|(xi, y)| phi.input_row(model, xi, y)).collect();
    let mut tape = Tape::new();
    let x = tape.input("x", Tensor::from_rows(&rows)?);
    let (mu, sigma) = phi.forward(&mut tape, x)?;
    let (mu_t, sigma_t) = (tape.value(mu).clone(), tape.value(sigma).clone());
    let d = mu_t.cols;
    let results: Vec<Result<(f64, Vec<f64>, Vec<f64>)>> = (0..pairs.len())
        .into_par_iter()
        .map(|b| {
            let vp = VariationalParams { mu: mu_t.row_slice(b).to_vec(), sigma: sigma_t.row_slice(b).to_vec() };
            pair_elbo(model, phi.family, &vp, &pairs[b].0, &pairs[b].1, &eps[b], true)
        })
        .collect();
    let ok = results.iter().filter(|r| r.is_ok()).count();
    if ok == 0 {
        return Err(results.into_iter().find_map(|r| r.err()).unwrap_or(Error::NonFiniteElbo));
    }
    let mut gmu = Tensor::zeros(pairs.len(), d);
    let mut gsigma = Tensor::zeros(pairs.len(), d);
    let mut values = Vec::with_capacity(ok);
    for (b, r) in results.iter().enumerate() {
        if let Ok((v, gm, gs)) = r {
            values.push(*v);
            for k in 0..d {
                gmu.data[b * d + k] = gm[k] / ok as f64;
                gsigma.data[b * d + k] = gs[k] / ok as f64;
            }
        }
    }
    let gm = tape.constant(gmu);
    let gs = tape.constant(gsigma);
    let a = tape.mul(mu, gm)?;
    let b = tape.mul(sigma, gs)?;
    let sa = tape.sum(a);
    let sb = tape.sum(b);
    let surrogate = tape.add(sa, sb)?;
    let grads = tape.backward(surrogate)?;
    let g = PARAM_NAMES.iter().map(|n| grads.get(n).expect("weights are inputs").clone()).collect();
    Ok((kahan_sum(values) / ok as f64, g, pairs.len() - ok))
}

/// Monte Carlo ELBO of one pair and its gradient in the encoder weights.
pub fn elbo<R: Rng + ?Sized>(
    phi: &EncoderWeights,
    model: &dyn ForwardModel,
    xi: &[f64],
    y: &[f64],
    n_samples: usize,
    rng: &mut R,
) -> Result<(f64, Vec<Tensor>)> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("ELBO needs at least one sample".into()));
    }
    let eps = vec![(0..n_samples).map(|_| standard_normals(rng, phi.theta_dim())).collect::<Vec<_>>()];
    let (v, g, skipped) = elbo_with_noise(phi, model, &[(xi.to_vec(), y.to_vec())], &eps)?;
    debug_assert_eq!(skipped, 0);
    Ok((v, g))
}

/// Simulated `(ξ, θ, y)` pairs with base noise, one independent stream per pair.
fn simulate_batch(
    model: &dyn ForwardModel,
    grid: &[Vec<f64>],
    n: usize,
    inner: usize,
    stream: RandomStream,
) -> Result<(Vec<(Vec<f64>, Vec<f64>)>, Vec<Vec<Vec<f64>>>)> {
    let d = model.theta_dim();
    let sims: Vec<Result<_>> = (0..n)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream.split(b as u64).rng();
            let xi = grid[rng.random_range(0..grid.len())].clone();
            let theta = model.prior().sample(&mut rng);
            let y = model.simulate(&theta, &xi, &mut rng)?;
            let eps: Vec<Vec<f64>> = (0..inner).map(|_| standard_normals(&mut rng, d)).collect();
            Ok(((xi, y), eps))
        })
        .collect();
    let mut pairs = Vec::with_capacity(n);
    let mut noise = Vec::with_capacity(n);
    for s in sims {
        let (p, e) = s?;
        pairs.push(p);
        noise.push(e);
    }
    Ok((pairs, noise))
}

/// Mean held-out ELBO with fixed pairs and noise.
fn heldout_elbo(
    phi: &EncoderWeights,
    model: &dyn ForwardModel,
    pairs: &[(Vec<f64>, Vec<f64>)],
    eps: &[Vec<Vec<f64>>],
) -> Result<f64> {
    let rows: Vec<Vec<f64>> = pairs.iter().map(|(xi, y)| phi.input_row(model, xi, y)).collect();
    let mut tape = Tape::new();
    let x = tape.input("x", Tensor::from_rows(&rows)?);
    let (mu, sigma) = phi.forward(&mut tape, x)?;
    let (mu_t, sigma_t) = (tape.value(mu), tape.value(sigma));
    let values: Vec<Option<f64>> = (0..pairs.len())
        .into_par_iter()
        .map(|b| {
            let vp = VariationalParams { mu: mu_t.row_slice(b).to_vec(), sigma: sigma_t.row_slice(b).to_vec() };
            pair_elbo(model, phi.family, &vp, &pairs[b].0, &pairs[b].1, &eps[b], false).ok().map(|r| r.0)
        })
        .collect();
    let ok: Vec<f64> = values.into_iter().flatten().collect();
    if ok.is_empty() {
        return Err(Error::NonFiniteElbo);
    }
    Ok(kahan_sum(ok.iter().copied()) / ok.len() as f64)
}

struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    /// Ascent step along `grads`.
    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.data.len() {
                m.data[i] = Self::B1 * m.data[i] + (1.0 - Self::B1) * g.data[i];
                v.data[i] = Self::B2 * v.data[i] + (1.0 - Self::B2) * g.data[i] * g.data[i];
                p.data[i] += lr * (m.data[i] / c1) / ((v.data[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Trains the encoder by stochastic ELBO ascent over freshly simulated
/// minibatches with designs uniform on the model grid.
pub fn train_amortizer(
    model: &dyn ForwardModel,
    cfg: &TrainConfig,
    bounds: HeadBounds,
) -> Result<(EncoderWeights, TrainingRecord)> {
    cfg.validate()?;
    let root = RandomStream::new(cfg.seed);
    let (y_mean, y_std) = prior_predictive_stats(model, cfg.standardize_sims, root.split(1))?;
    let mut phi = EncoderWeights::init(model, bounds, y_mean, y_std, cfg.seed)?;
    let grid = model.design_grid();
    let (eval_pairs, eval_eps) = simulate_batch(model, &grid, cfg.eval_pairs, cfg.inner_samples, root.split(2))?;
    let batches = root.split(3);
    let mut adam = Adam::new(&phi.params);
    let mut record = TrainingRecord::default();
    for epoch in 0..cfg.epochs {
        if epoch % cfg.eval_every == 0 {
            record.eval_epochs.push(epoch);
            record.eval_elbo.push(heldout_elbo(&phi, model, &eval_pairs, &eval_eps)?);
        }
        let (pairs, eps) = simulate_batch(model, &grid, cfg.outer_batch, cfg.inner_samples, batches.split(epoch as u64))?;
        let (value, grads, skipped) = match elbo_with_noise(&phi, model, &pairs, &eps) {
            Ok(r) => r,
            Err(Error::NonFiniteEncoder) | Err(Error::NonFiniteElbo) => return Err(Error::TrainingDiverged(epoch)),
            Err(e) => return Err(e),
        };
        if !value.is_finite() || grads.iter().any(|g| g.data.iter().any(|x| !x.is_finite())) {
            return Err(Error::TrainingDiverged(epoch));
        }
        record.epoch_elbo.push(value);
        record.skipped_pairs += skipped;
        adam.step(&mut phi.params, &grads, cfg.learning_rate);
    }
    record.eval_epochs.push(cfg.epochs);
    record.eval_elbo.push(heldout_elbo(&phi, model, &eval_pairs, &eval_eps)?);
    Ok((phi, record))
}
