//! Random streams, elementary densities, reparameterized sampling and
//! self-normalized importance weights.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Counter-based random stream. Two streams with the same `(seed, stream_id)`
/// produce the same draws; distinct stream ids select disjoint ChaCha streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RandomStream {
    pub seed: u64,
    pub stream_id: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream_id: 0 }
    }

    /// Child stream `k`. The child id is a bijective mix of the parent id and `k`,
    /// so children of one parent never collide with each other.
    pub fn split(&self, k: u64) -> Self {
        let base = splitmix64(self.stream_id ^ 0xD1B5_4A32_D192_ED03);
        Self {
            seed: self.seed,
            stream_id: base.wrapping_add(splitmix64(k.wrapping_add(1))),
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

pub fn standard_normals<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn check_scales(mu: &[f64], sigma: &[f64]) -> Result<()> {
    if mu.len() != sigma.len() {
        return Err(Error::InvalidArgument(format!(
            "mu has {} entries but sigma has {}",
            mu.len(),
            sigma.len()
        )));
    }
    if let Some(k) = sigma.iter().position(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "sigma[{k}] = {} is not strictly positive",
            sigma[k]
        )));
    }
    Ok(())
}

/// Diagonal LogNormal: `ln θ_k ~ N(mu_k, sigma_k²)` independently.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagLogNormal {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl DiagLogNormal {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        check_scales(&mu, &sigma)?;
        Ok(Self { mu, sigma })
    }

    pub fn log_density(&self, theta: &[f64]) -> f64 {
        let mut acc = 0.0;
        for k in 0..self.mu.len() {
            if theta[k] <= 0.0 {
                return f64::NEG_INFINITY;
            }
            let l = theta[k].ln();
            let z = (l - self.mu[k]) / self.sigma[k];
            acc += -l - self.sigma[k].ln() - LN_SQRT_2PI - 0.5 * z * z;
        }
        acc
    }
}

/// Diagonal Normal: `θ_k ~ N(mu_k, sigma_k²)` independently.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagNormal {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl DiagNormal {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        check_scales(&mu, &sigma)?;
        Ok(Self { mu, sigma })
    }

    pub fn log_density(&self, theta: &[f64]) -> f64 {
        let mut acc = 0.0;
        for k in 0..self.mu.len() {
            let z = (theta[k] - self.mu[k]) / self.sigma[k];
            acc += -self.sigma[k].ln() - LN_SQRT_2PI - 0.5 * z * z;
        }
        acc
    }
}

/// Reparameterizable diagonal family.
#[derive(Debug, Clone, PartialEq)]
pub enum Family {
    LogNormal(DiagLogNormal),
    Normal(DiagNormal),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FamilyKind {
    LogNormal,
    Normal,
}

impl Family {
    pub fn from_parts(kind: FamilyKind, mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        Ok(match kind {
            FamilyKind::LogNormal => Family::LogNormal(DiagLogNormal::new(mu, sigma)?),
            FamilyKind::Normal => Family::Normal(DiagNormal::new(mu, sigma)?),
        })
    }

    pub fn kind(&self) -> FamilyKind {
        match self {
            Family::LogNormal(_) => FamilyKind::LogNormal,
            Family::Normal(_) => FamilyKind::Normal,
        }
    }

    pub fn mu(&self) -> &[f64] {
        match self {
            Family::LogNormal(d) => &d.mu,
            Family::Normal(d) => &d.mu,
        }
    }

    pub fn sigma(&self) -> &[f64] {
        match self {
            Family::LogNormal(d) => &d.sigma,
            Family::Normal(d) => &d.sigma,
        }
    }

    pub fn dim(&self) -> usize {
        self.mu().len()
    }

    pub fn log_density(&self, theta: &[f64]) -> f64 {
        match self {
            Family::LogNormal(d) => d.log_density(theta),
            Family::Normal(d) => d.log_density(theta),
        }
    }

    /// `∇_θ log p(θ)`.
    pub fn grad_log_density(&self, theta: &[f64]) -> Vec<f64> {
        match self {
            Family::LogNormal(d) => (0..d.mu.len())
                .map(|k| {
                    let z = (theta[k].ln() - d.mu[k]) / (d.sigma[k] * d.sigma[k]);
                    -(1.0 + z) / theta[k]
                })
                .collect(),
            Family::Normal(d) => (0..d.mu.len()).map(|k| -(theta[k] - d.mu[k]) / (d.sigma[k] * d.sigma[k])).collect(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let eps = standard_normals(rng, self.dim());
        reparam_sample(self, &eps).expect("dimension is consistent by construction")
    }
}

/// `θ = exp(μ + σ⊙ε)` for LogNormal families, `θ = μ + σ⊙ε` for Normal ones.
pub fn reparam_sample(family: &Family, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != family.dim() {
        return Err(Error::InvalidArgument(format!(
            "eps has dimension {} but the family has dimension {}",
            eps.len(),
            family.dim()
        )));
    }
    let (mu, sigma) = (family.mu(), family.sigma());
    let lin = mu.iter().zip(sigma).zip(eps).map(|((m, s), e)| m + s * e);
    Ok(match family.kind() {
        FamilyKind::LogNormal => lin.map(f64::exp).collect(),
        FamilyKind::Normal => lin.collect(),
    })
}

/// Reparameterized samples with their normalized importance weights and the
/// pathwise Jacobian `∂θ/∂ξ`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPosterior {
    pub thetas: Vec<Vec<f64>>,
    pub eps: Vec<Vec<f64>>,
    pub log_w: Vec<f64>,
    pub w_tilde: Vec<f64>,
    /// `dtheta_dxi[i][k * design_dim + j] = ∂θ_ik / ∂ξ_j`; empty when not requested.
    pub dtheta_dxi: Vec<Vec<f64>>,
    /// `dlogw_dxi[i][j] = d log w_i / dξ_j` along the reparameterized path;
    /// empty when not requested.
    pub dlogw_dxi: Vec<Vec<f64>>,
    pub design_dim: usize,
}

impl WeightedPosterior {
    /// Posterior with given samples and weights, no Jacobian.
    pub fn from_samples(thetas: Vec<Vec<f64>>, w_tilde: Vec<f64>) -> Self {
        let n = thetas.len();
        let d = thetas.first().map_or(0, |t| t.len());
        Self {
            thetas,
            eps: vec![vec![0.0; d]; n],
            log_w: w_tilde.iter().map(|w| w.ln()).collect(),
            w_tilde,
            dtheta_dxi: Vec::new(),
            dlogw_dxi: Vec::new(),
            design_dim: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.thetas.first().map_or(0, |t| t.len())
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (t, w) in self.thetas.iter().zip(&self.w_tilde) {
            for (mk, tk) in m.iter_mut().zip(t) {
                *mk += w * tk;
            }
        }
        m
    }

    pub fn jacobian(&self, i: usize, k: usize, j: usize) -> f64 {
        self.dtheta_dxi[i][k * self.design_dim + j]
    }

    /// `dw̃_i/dξ_j = w̃_i (d log w_i − Σ_k w̃_k d log w_k)`; zero without log-weight derivatives.
    pub fn dweight_dxi(&self) -> Vec<Vec<f64>> {
        let p = self.design_dim;
        if self.dlogw_dxi.is_empty() {
            return vec![vec![0.0; p]; self.len()];
        }
        let avg: Vec<f64> = (0..p)
            .map(|j| self.w_tilde.iter().zip(&self.dlogw_dxi).filter(|(w, _)| **w > 0.0).map(|(w, d)| w * d[j]).sum())
            .collect();
        self.w_tilde
            .iter()
            .zip(&self.dlogw_dxi)
            .map(|(w, d)| if *w > 0.0 { (0..p).map(|j| w * (d[j] - avg[j])).collect() } else { vec![0.0; p] })
            .collect()
    }
}

/// Numerically stable `ln Σ exp(x_i)`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax of log-weights with max subtraction.
pub fn normalize_weights(log_w: &[f64]) -> Result<Vec<f64>> {
    if log_w.is_empty() {
        return Err(Error::InvalidArgument("empty log-weight vector".into()));
    }
    if let Some(i) = log_w.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFiniteWeight(i));
    }
    let m = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = log_w.iter().map(|x| (x - m).exp()).collect();
    let total = kahan_sum(w.iter().copied());
    for wi in &mut w {
        *wi /= total;
    }
    Ok(w)
}

/// `1 / Σ w̃_i²`.
pub fn effective_sample_size(w_tilde: &[f64]) -> f64 {
    1.0 / w_tilde.iter().map(|w| w * w).sum::<f64>()
}

const LN_FACTORIAL: [f64; 21] = [
    0.0,
    0.0,
    std::f64::consts::LN_2,
    1.791_759_469_228_055,
    3.178_053_830_347_945_6,
    4.787_491_742_782_046,
    6.579_251_212_010_101,
    8.525_161_361_065_415,
    10.604_602_902_745_25,
    12.801_827_480_081_469,
    15.104_412_573_075_516,
    17.502_307_845_873_887,
    19.987_214_495_661_885,
    22.552_163_853_123_42,
    25.191_221_182_738_683,
    27.899_271_383_840_894,
    30.671_860_106_080_675,
    33.505_073_450_136_89,
    36.395_445_208_033_05,
    39.339_884_187_199_495,
    42.335_616_460_753_485,
];

/// `ln k!`, exact table for `k ≤ 20`, log-gamma beyond.
pub fn ln_factorial(k: u64) -> f64 {
    if k <= 20 {
        LN_FACTORIAL[k as usize]
    } else {
        statrs::function::gamma::ln_gamma(k as f64 + 1.0)
    }
}

pub fn poisson_logpmf(k: u64, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "Poisson rate must be positive, got {lambda}"
        )));
    }
    Ok(k as f64 * lambda.ln() - lambda - ln_factorial(k))
}

/// Sum of independent 1-D Gaussian log-densities.
pub fn gaussian_logpdf(x: &[f64], mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if x.len() != mu.len() || x.len() != sigma.len() {
        return Err(Error::InvalidArgument("dimension mismatch".into()));
    }
    let mut acc = 0.0;
    for k in 0..x.len() {
        if !(sigma[k] > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sigma[{k}] = {} is not strictly positive",
                sigma[k]
            )));
        }
        let z = (x[k] - mu[k]) / sigma[k];
        acc += -0.5 * z * z - sigma[k].ln() - 0.5 * (2.0 * PI).ln();
    }
    Ok(acc)
}

/// Compensated summation; summation order is the iterator order, so results
/// only depend on how the caller orders its terms.
pub fn kahan_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for x in xs {
        let y = x - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Sample mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = kahan_sum(xs.iter().copied()) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = kahan_sum(xs.iter().map(|x| (x - mean) * (x - mean))) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}
