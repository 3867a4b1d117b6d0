//! Amortized variational posterior: a bounded two-head MLP mapping `(ξ, y)` to
//! the parameters of a diagonal posterior, trained once by ELBO ascent.

mod train;

pub use train::{elbo, elbo_with_noise, train_amortizer, TrainConfig, TrainingRecord};

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::{ForwardModel, ModelKind};
use crate::prob::{
    normalize_weights, reparam_sample, standard_normals, Family, FamilyKind, RandomStream, WeightedPosterior,
};

pub const HIDDEN: usize = 64;

/// Names of the trainable tensors, in storage order.
pub const PARAM_NAMES: [&str; 8] = ["w1", "b1", "w2", "b2", "w_mu", "b_mu", "w_sigma", "b_sigma"];

/// Output bounds `μ ∈ μ₀ ± Δ_max`, `σ ∈ (σ_min, σ_max)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadBounds {
    pub mu0: Vec<f64>,
    pub delta_max: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl HeadBounds {
    /// Prior-centred bounds with `Δ_max = 1`, `σ ∈ (0.01, 1)`.
    pub fn for_prior(prior: &Family) -> Self {
        Self { mu0: prior.mu().to_vec(), delta_max: 1.0, sigma_min: 0.01, sigma_max: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta_max > 0.0 && self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return Err(Error::InvalidArgument("head bounds need Δ_max > 0 and 0 < σ_min < σ_max".into()));
        }
        Ok(())
    }
}

/// Parameters of the encoder plus the fixed input standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub model: ModelKind,
    pub family: FamilyKind,
    /// `[w1, b1, w2, b2, w_mu, b_mu, w_sigma, b_sigma]`.
    pub params: Vec<Tensor>,
    pub bounds: HeadBounds,
    /// Mean and standard deviation of the observation features.
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl VariationalParams {
    pub fn family(&self, kind: FamilyKind) -> Result<Family> {
        Family::from_parts(kind, self.mu.clone(), self.sigma.clone())
    }
}

/// Observation-feature mean and standard deviation under the prior predictive
/// with designs drawn uniformly from the grid.
pub fn prior_predictive_stats(model: &dyn ForwardModel, n: usize, stream: RandomStream) -> Result<(Vec<f64>, Vec<f64>)> {
    let grid = model.design_grid();
    let mut rng = stream.rng();
    let feats: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let xi = &grid[rng.random_range(0..grid.len())];
            let theta = model.prior().sample(&mut rng);
            model.simulate(&theta, xi, &mut rng).map(|y| model.obs_features(&y))
        })
        .collect::<Result<_>>()?;
    let dim = model.obs_dim();
    let mut mean = vec![0.0; dim];
    let mut std = vec![0.0; dim];
    for k in 0..dim {
        let col: Vec<f64> = feats.iter().map(|f| f[k]).collect();
        let m = col.iter().sum::<f64>() / n as f64;
        let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
        mean[k] = m;
        std[k] = if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 };
    }
    Ok((mean, std))
}

fn uniform_tensor<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, limit: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(rows, cols, data).expect("shape matches data")
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl EncoderWeights {
    /// Glorot-uniform hidden layers, small output heads, and a scale bias that
    /// starts the posterior at the prior width (clamped into the bounds).
    pub fn init(model: &dyn ForwardModel, bounds: HeadBounds, y_mean: Vec<f64>, y_std: Vec<f64>, seed: u64) -> Result<Self> {
        bounds.validate()?;
        let d = model.theta_dim();
        if bounds.mu0.len() != d || y_mean.len() != model.obs_dim() || y_std.len() != model.obs_dim() {
            return Err(Error::Shape("encoder bounds or standardizer do not match the model".into()));
        }
        let input = model.design_dim() + model.obs_dim();
        let mut rng = RandomStream::new(seed).split(0x1417).rng();
        let glorot = |a: usize, b: usize| (6.0 / (a + b) as f64).sqrt();
        let span = bounds.sigma_max - bounds.sigma_min;
        let b_sigma = model
            .prior()
            .sigma()
            .iter()
            .map(|s| logit(((s - bounds.sigma_min) / span).clamp(0.02, 0.98)))
            .collect();
        let params = vec![
            uniform_tensor(&mut rng, input, HIDDEN, glorot(input, HIDDEN)),
            Tensor::zeros(1, HIDDEN),
            uniform_tensor(&mut rng, HIDDEN, HIDDEN, glorot(HIDDEN, HIDDEN)),
            Tensor::zeros(1, HIDDEN),
            uniform_tensor(&mut rng, HIDDEN, d, 0.01),
            Tensor::zeros(1, d),
            uniform_tensor(&mut rng, HIDDEN, d, 0.01),
            Tensor::row(b_sigma),
        ];
        Ok(Self { model: model.kind(), family: model.prior().kind(), params, bounds, y_mean, y_std })
    }

    /// All-zero weights with unit standardization.
    pub fn zeros(model: &dyn ForwardModel, bounds: HeadBounds) -> Self {
        let d = model.theta_dim();
        let input = model.design_dim() + model.obs_dim();
        let params = vec![
            Tensor::zeros(input, HIDDEN),
            Tensor::zeros(1, HIDDEN),
            Tensor::zeros(HIDDEN, HIDDEN),
            Tensor::zeros(1, HIDDEN),
            Tensor::zeros(HIDDEN, d),
            Tensor::zeros(1, d),
            Tensor::zeros(HIDDEN, d),
            Tensor::zeros(1, d),
        ];
        Self {
            model: model.kind(),
            family: model.prior().kind(),
            params,
            bounds,
            y_mean: vec![0.0; model.obs_dim()],
            y_std: vec![1.0; model.obs_dim()],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.params[0].rows
    }

    pub fn theta_dim(&self) -> usize {
        self.params[4].cols
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|t| t.data.len()).sum()
    }

    /// Encoder input row: design scaled to the unit box, then standardized
    /// observation features.
    pub fn input_row(&self, model: &dyn ForwardModel, xi: &[f64], y: &[f64]) -> Vec<f64> {
        let mut row = model.design_features(xi);
        let feats = model.obs_features(y);
        row.extend(feats.iter().zip(self.y_mean.iter().zip(&self.y_std)).map(|(f, (m, s))| (f - m) / s));
        row
    }

    /// Records the network on `tape` for a batch `x` and returns `(μ, σ)`.
    /// Weights are registered as named inputs so their gradients are available.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let p: Vec<Var> = PARAM_NAMES.iter().zip(&self.params).map(|(n, t)| tape.input(n, t.clone())).collect();
        let h = tape.matmul(x, p[0])?;
        let h = tape.add_row(h, p[1])?;
        let h = tape.tanh(h);
        let h = tape.matmul(h, p[2])?;
        let h = tape.add_row(h, p[3])?;
        let h = tape.tanh(h);
        let m = tape.matmul(h, p[4])?;
        let m = tape.add_row(m, p[5])?;
        let m = tape.tanh(m);
        let m = tape.affine(m, self.bounds.delta_max, 0.0);
        let mu0 = tape.constant(Tensor::row(self.bounds.mu0.clone()));
        let mu = tape.add_row(m, mu0)?;
        let s = tape.matmul(h, p[6])?;
        let s = tape.add_row(s, p[7])?;
        let s = tape.sigmoid(s);
        let sigma = tape.affine(s, self.bounds.sigma_max - self.bounds.sigma_min, self.bounds.sigma_min);
        for v in [mu, sigma] {
            if tape.value(v).data.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteEncoder);
            }
        }
        Ok((mu, sigma))
    }
}

/// Variational parameters for one `(ξ, y)` pair.
pub fn encode(phi: &EncoderWeights, model: &dyn ForwardModel, xi: &[f64], y: &[f64]) -> Result<VariationalParams> {
    let mut tape = Tape::new();
    let x = tape.input("x", Tensor::row(phi.input_row(model, xi, y)));
    let (mu, sigma) = phi.forward(&mut tape, x)?;
    Ok(VariationalParams { mu: tape.value(mu).data.clone(), sigma: tape.value(sigma).data.clone() })
}

/// Variational parameters with their design Jacobians, `dmu[k][j] = ∂μ_k/∂ξ_j`.
pub fn encode_with_jacobian(
    phi: &EncoderWeights,
    model: &dyn ForwardModel,
    xi: &[f64],
    y: &[f64],
) -> Result<(VariationalParams, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let x = tape.input("x", Tensor::row(phi.input_row(model, xi, y)));
    let (mu, sigma) = phi.forward(&mut tape, x)?;
    let d = phi.theta_dim();
    let p = model.design_dim();
    let scale = model.design_feature_scale();
    let mut jac = |out: Var| -> Result<Vec<Vec<f64>>> {
        (0..d)
            .map(|k| {
                let mut sel = vec![0.0; d];
                sel[k] = 1.0;
                let sel = tape.constant(Tensor::row(sel));
                let picked = tape.mul(out, sel)?;
                let scalar = tape.sum(picked);
                let g = tape.backward(scalar)?.wrt(x);
                Ok((0..p).map(|j| g.data[j] * scale[j]).collect())
            })
            .collect()
    };
    let dmu = jac(mu)?;
    let dsigma = jac(sigma)?;
    let params = VariationalParams { mu: tape.value(mu).data.clone(), sigma: tape.value(sigma).data.clone() };
    Ok((params, dmu, dsigma))
}

/// Self-normalized importance weights `w ∝ p(y|θ,ξ) p(θ) / q(θ)` for the
/// samples `θ_i = T(μ + σ ε_i)`. Samples whose likelihood cannot be evaluated
/// get zero weight; if every sample does, the weights are degenerate.
pub fn importance_posterior(
    model: &dyn ForwardModel,
    q: &Family,
    xi: &[f64],
    y: &[f64],
    eps: Vec<Vec<f64>>,
) -> Result<WeightedPosterior> {
    let thetas: Vec<Vec<f64>> = eps.iter().map(|e| reparam_sample(q, e)).collect::<Result<_>>()?;
    let log_w: Vec<f64> = thetas
        .iter()
        .map(|t| match model.loglik(y, t, xi) {
            Ok(ll) => ll + model.prior().log_density(t) - q.log_density(t),
            Err(_) => f64::NEG_INFINITY,
        })
        .collect();
    let finite: Vec<usize> = (0..log_w.len()).filter(|&i| log_w[i].is_finite()).collect();
    if finite.is_empty() {
        return Err(Error::DegenerateWeights);
    }
    let sub = normalize_weights(&finite.iter().map(|&i| log_w[i]).collect::<Vec<_>>())?;
    let mut w_tilde = vec![0.0; log_w.len()];
    for (&i, w) in finite.iter().zip(sub) {
        w_tilde[i] = w;
    }
    Ok(WeightedPosterior { thetas, eps, log_w, w_tilde, dtheta_dxi: Vec::new(), dlogw_dxi: Vec::new(), design_dim: xi.len() })
}

/// Weighted posterior for `(ξ, y)` with pathwise Jacobians `∂θ_i/∂ξ` taken
/// through the encoder at fixed base noise. The weights carry no derivative.
pub fn posterior_with_jacobian<R: Rng + ?Sized>(
    phi: &EncoderWeights,
    model: &dyn ForwardModel,
    xi: &[f64],
    y: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<WeightedPosterior> {
    build_posterior(phi, model, xi, y, n, rng, false)
}

/// As [`posterior_with_jacobian`], plus the derivative of every log
/// importance weight along the reparameterized path:
/// `d/dξ [log p(y|θ_i,ξ) + log p(θ_i) − log q(θ_i|ξ,y)]` with `θ_i = θ_i(ξ)`.
pub fn posterior_with_weight_derivatives<R: Rng + ?Sized>(
    phi: &EncoderWeights,
    model: &dyn ForwardModel,
    xi: &[f64],
    y: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<WeightedPosterior> {
    build_posterior(phi, model, xi, y, n, rng, true)
}

fn build_posterior<R: Rng + ?Sized>(
    phi: &EncoderWeights,
    model: &dyn ForwardModel,
    xi: &[f64],
    y: &[f64],
    n: usize,
    rng: &mut R,
    weight_derivatives: bool,
) -> Result<WeightedPosterior> {
    if n == 0 {
        return Err(Error::InvalidArgument("posterior needs at least one sample".into()));
    }
    let (params, dmu, dsigma) = encode_with_jacobian(phi, model, xi, y)?;
    let q = params.family(phi.family)?;
    let d = q.dim();
    let eps: Vec<Vec<f64>> = (0..n).map(|_| standard_normals(rng, d)).collect();
    let mut post = importance_posterior(model, &q, xi, y, eps)?;
    let p = xi.len();
    let lognormal = phi.family == FamilyKind::LogNormal;
    post.dtheta_dxi = post
        .thetas
        .iter()
        .zip(&post.eps)
        .map(|(theta, e)| {
            let mut row = vec![0.0; d * p];
            for k in 0..d {
                let chain = if lognormal { theta[k] } else { 1.0 };
                for j in 0..p {
                    row[k * p + j] = chain * (dmu[k][j] + e[k] * dsigma[k][j]);
                }
            }
            row
        })
        .collect();
    if weight_derivatives {
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            if post.w_tilde[i] == 0.0 {
                rows.push(vec![0.0; p]);
                continue;
            }
            let theta = &post.thetas[i];
            let e = &post.eps[i];
            let explicit = model.score_dxi(y, theta, xi)?;
            let (_, g_lik) = model.loglik_grad(y, theta, xi)?;
            let g_prior = model.prior().grad_log_density(theta);
            let row: Vec<f64> = (0..p)
                .map(|j| {
                    let mut v = explicit[j];
                    for k in 0..d {
                        v += (g_lik[k] + g_prior[k]) * post.dtheta_dxi[i][k * p + j];
                        // −d log q(θ_i)/dξ along the path.
                        v += dsigma[k][j] / params.sigma[k];
                        if lognormal {
                            v += dmu[k][j] + e[k] * dsigma[k][j];
                        }
                    }
                    v
                })
                .collect();
            rows.push(row);
        }
        post.dlogw_dxi = rows;
    }
    Ok(post)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{default_model, LinearGaussian, SiqrConfig, SiqrModel};
    use crate::prob::{mean_stderr, DiagNormal};
    use proptest::prelude::*;

    fn trained_like(model: &dyn ForwardModel, seed: u64) -> EncoderWeights {
        // Larger random heads so outputs actually depend on the input.
        let mut phi = EncoderWeights::init(
            model,
            HeadBounds::for_prior(model.prior()),
            vec![0.0; model.obs_dim()],
            vec![1.0; model.obs_dim()],
            seed,
        )
        .unwrap();
        let mut rng = RandomStream::new(seed).rng();
        for k in [4, 6] {
            let t = &phi.params[k];
            phi.params[k] = uniform_tensor(&mut rng, t.rows, t.cols, 0.5);
        }
        phi
    }

    #[test]
    fn zero_weights_give_centre_of_bounds() {
        let model = default_model(ModelKind::Siqr).unwrap();
        let phi = EncoderWeights::zeros(model.as_ref(), HeadBounds::for_prior(model.prior()));
        let out = encode(&phi, model.as_ref(), &[4.0], &[10.0, 3.0]).unwrap();
        assert_eq!(out.mu, model.prior().mu());
        for s in out.sigma {
            assert!((s - 0.505).abs() < 1e-15);
        }
    }

    #[test]
    fn mean_jacobian_matches_finite_differences() {
        let model = default_model(ModelKind::SrcLoc).unwrap();
        let phi = trained_like(model.as_ref(), 3);
        let (xi, y) = ([0.7, -1.3], [0.4, 0.2, -0.9]);
        let (_, dmu, dsigma) = encode_with_jacobian(&phi, model.as_ref(), &xi, &y).unwrap();
        let h = 1e-5;
        for j in 0..2 {
            let (mut xp, mut xm) = (xi, xi);
            xp[j] += h;
            xm[j] -= h;
            let (p, m) = (encode(&phi, model.as_ref(), &xp, &y).unwrap(), encode(&phi, model.as_ref(), &xm, &y).unwrap());
            for k in 0..2 {
                let fd = (p.mu[k] - m.mu[k]) / (2.0 * h);
                assert!((fd - dmu[k][j]).abs() <= 1e-5 * (dmu[k][j].abs() + 1e-8).max(1e-3), "{fd} {}", dmu[k][j]);
                let fd = (p.sigma[k] - m.sigma[k]) / (2.0 * h);
                assert!((fd - dsigma[k][j]).abs() <= 1e-5 * (dsigma[k][j].abs() + 1e-8).max(1e-3));
            }
        }
    }

    #[test]
    fn lognormal_sample_jacobian_is_chain_rule() {
        let model = SiqrModel::new(SiqrConfig::default()).unwrap();
        let phi = trained_like(&model, 8);
        let (xi, y) = (6.3, [30.0, 12.0]);
        let post = posterior_with_jacobian(&phi, &model, &[xi], &y, 5, &mut RandomStream::new(2).rng()).unwrap();
        let h = 1e-5;
        let q = |x: f64| encode(&phi, &model, &[x], &y).unwrap().family(FamilyKind::LogNormal).unwrap();
        let (qp, qm) = (q(xi + h), q(xi - h));
        for i in 0..5 {
            let tp = reparam_sample(&qp, &post.eps[i]).unwrap();
            let tm = reparam_sample(&qm, &post.eps[i]).unwrap();
            for k in 0..4 {
                let fd = (tp[k] - tm[k]) / (2.0 * h);
                let an = post.jacobian(i, k, 0);
                assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-3), "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn log_weight_derivative_matches_finite_differences() {
        // PK has an analytic design score; SIQR differences its trajectory.
        for (kind, xi, y, tol) in [(ModelKind::Pk, 7.3, vec![9.0], 1e-5), (ModelKind::Siqr, 6.3, vec![30.0, 12.0], 1e-3)] {
            let model = default_model(kind).unwrap();
            let phi = trained_like(model.as_ref(), 4);
            let build = |x: f64, deriv: bool| {
                let mut rng = RandomStream::new(5).rng();
                if deriv {
                    posterior_with_weight_derivatives(&phi, model.as_ref(), &[x], &y, 6, &mut rng).unwrap()
                } else {
                    posterior_with_jacobian(&phi, model.as_ref(), &[x], &y, 6, &mut rng).unwrap()
                }
            };
            let post = build(xi, true);
            let h = 1e-5;
            let (p, m) = (build(xi + h, false), build(xi - h, false));
            assert!(post.w_tilde.iter().filter(|&&w| w > 0.0).count() >= 2);
            for i in (0..6).filter(|&i| post.w_tilde[i] > 0.0) {
                let fd = (p.log_w[i] - m.log_w[i]) / (2.0 * h);
                let an = post.dlogw_dxi[i][0];
                assert!((fd - an).abs() <= tol * an.abs().max(1.0), "{kind} sample {i}: {fd} vs {an}");
            }
            let dw = post.dweight_dxi();
            let total: f64 = dw.iter().map(|r| r[0]).sum();
            assert!(total.abs() < 1e-12);
        }
    }

    #[test]
    fn exact_posterior_proposal_gives_uniform_weights() {
        let toy = LinearGaussian::standard();
        let (xi, y) = (1.5, 0.8);
        let (m, s) = toy.posterior(y, xi);
        let q = Family::Normal(DiagNormal::new(vec![m], vec![s]).unwrap());
        let mut rng = RandomStream::new(1).rng();
        let eps = (0..40).map(|_| standard_normals(&mut rng, 1)).collect();
        let post = importance_posterior(&toy, &q, &[xi], &[y], eps).unwrap();
        for w in &post.w_tilde {
            assert!((w - 1.0 / 40.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn self_normalized_mean_converges_on_conjugate_toy() {
        let toy = LinearGaussian::standard();
        let (xi, y) = (1.0, 1.3);
        let (m, _) = toy.posterior(y, xi);
        let n = 10_000;
        let mut rng = RandomStream::new(12).rng();
        let eps = (0..n).map(|_| standard_normals(&mut rng, 1)).collect();
        let post = importance_posterior(&toy, toy.prior(), &[xi], &[y], eps).unwrap();
        let est = post.mean()[0];
        // Delta-method standard error of the ratio estimator.
        let terms: Vec<f64> = post.thetas.iter().zip(&post.w_tilde).map(|(t, w)| n as f64 * w * (t[0] - est)).collect();
        let (_, se) = mean_stderr(&terms);
        assert!((est - m).abs() <= 4.0 * se, "{est} vs {m} ± {se}");
    }

    #[test]
    fn minimal_scale_collapses_samples() {
        let model = default_model(ModelKind::Pk).unwrap();
        let bounds = HeadBounds { sigma_min: 1e-6, sigma_max: 2e-6, ..HeadBounds::for_prior(model.prior()) };
        let phi = EncoderWeights::zeros(model.as_ref(), bounds);
        let post = posterior_with_jacobian(&phi, model.as_ref(), &[5.0], &[9.0], 20, &mut RandomStream::new(0).rng()).unwrap();
        for t in &post.thetas {
            for (tk, m) in t.iter().zip(model.prior().mu()) {
                assert!((tk / m.exp() - 1.0).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn posterior_is_deterministic() {
        let model = default_model(ModelKind::Pk).unwrap();
        let phi = trained_like(model.as_ref(), 4);
        let a = posterior_with_jacobian(&phi, model.as_ref(), &[5.0], &[9.0], 30, &mut RandomStream::new(7).rng()).unwrap();
        let b = posterior_with_jacobian(&phi, model.as_ref(), &[5.0], &[9.0], 30, &mut RandomStream::new(7).rng()).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn outputs_respect_bounds(t in 1.0f64..24.0, y in -1e3f64..1e3, seed in 0u64..4) {
            let model = default_model(ModelKind::Pk).unwrap();
            let mut phi = trained_like(model.as_ref(), seed);
            phi.params[5] = Tensor::row(vec![40.0, -40.0, 3.0]);
            let out = encode(&phi, model.as_ref(), &[t], &[y]).unwrap();
            for k in 0..3 {
                let mu0 = model.prior().mu()[k];
                prop_assert!(out.mu[k] >= mu0 - 1.0 && out.mu[k] <= mu0 + 1.0);
                prop_assert!(out.sigma[k] >= 0.01 && out.sigma[k] <= 1.0);
            }
        }
    }
}
