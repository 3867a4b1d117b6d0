//! Plain-text experiment configuration: `key = value` lines grouped under
//! `[section]` headers, `#` starts a comment. Unknown sections and keys are
//! rejected with their line number.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::amortizer::TrainConfig;
use crate::decision::RiskSpec;
use crate::design::{Budgets, SearchConfig};
use crate::error::{Error, Result};
use crate::models::{ModelKind, PkConfig, SiqrConfig, SrcLocConfig};

const KEYS: &[(&str, &[&str])] = &[
    ("", &["model", "risk", "seed", "output_dir", "weights"]),
    ("budgets", &["n_outer_eig", "n_inner_eig", "n_outer_cost", "n_posterior"]),
    (
        "train",
        &["learning_rate", "epochs", "outer_batch", "inner_samples", "eval_every", "eval_pairs", "standardize_sims"],
    ),
    ("search", &["xi_init", "first_step", "decay", "max_iter", "grad_tol"]),
    ("decision", &["penalty", "cost_slope", "calibration_draws", "calibration_dose", "null_space_instances"]),
    ("srcloc", &["s0", "c_base", "sigma_i", "sigma_phi"]),
    (
        "siqr",
        &["eps_rate", "n_pop", "horizon", "dt", "h_fd", "s0", "xa0", "xs0", "grid", "prior_mu", "prior_sigma"],
    ),
    ("pk", &["dose_ref", "dose_obs", "sigma_mult", "sigma_add", "horizon", "grid", "prior_mu", "prior_sigma"]),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub risk: RiskSpec,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Encoder weight file; trained and written when missing.
    pub weights: Option<PathBuf>,
    pub budgets: Budgets,
    pub train: TrainConfig,
    pub search: SearchConfig,
    /// Cost used when no outer sample admits a feasible decision.
    pub penalty: f64,
    pub cost_slope: f64,
    /// Prior draws and dose fraction used to calibrate the PK thresholds.
    pub calibration_draws: usize,
    pub calibration_dose: f64,
    pub null_space_instances: usize,
    pub srcloc: SrcLocConfig,
    pub siqr: SiqrConfig,
    pub pk: PkConfig,
}

/// Desk-scale training defaults; the learning rate depends on the model.
pub fn default_train(model: ModelKind, seed: u64) -> TrainConfig {
    let (learning_rate, outer_batch, inner_samples) = match model {
        ModelKind::SrcLoc => (3e-3, 256, 16),
        ModelKind::Siqr => (3e-4, 128, 16),
        ModelKind::Pk => (1e-3, 128, 16),
        ModelKind::LinearGaussian => (1e-2, 64, 16),
    };
    TrainConfig {
        learning_rate,
        epochs: 1000,
        outer_batch,
        inner_samples,
        seed,
        eval_every: 50,
        eval_pairs: 256,
        standardize_sims: 2000,
    }
}

impl ExperimentConfig {
    pub fn defaults(model: ModelKind, seed: u64) -> Self {
        Self {
            model,
            risk: match model {
                ModelKind::Siqr => RiskSpec::Chance(0.9),
                ModelKind::Pk => RiskSpec::Chance(0.8),
                _ => RiskSpec::Mean,
            },
            seed,
            output_dir: PathBuf::from("."),
            weights: None,
            budgets: Budgets::default(),
            train: default_train(model, seed),
            search: SearchConfig::default(),
            penalty: 10.0,
            cost_slope: 1.0,
            calibration_draws: 10_000,
            calibration_dose: 0.5,
            null_space_instances: 100,
            srcloc: SrcLocConfig::default(),
            siqr: SiqrConfig::default(),
            pk: PkConfig::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config { line: 0, msg: format!("{}: {e}", path.display()) })?;
        let mut cfg = text.parse::<Self>()?;
        // Relative paths are taken relative to the config file.
        if let Some(dir) = path.parent() {
            if cfg.output_dir.is_relative() {
                cfg.output_dir = dir.join(&cfg.output_dir);
            }
            if let Some(w) = cfg.weights.as_mut().filter(|w| w.is_relative()) {
                *w = dir.join(&*w);
            }
        }
        Ok(cfg)
    }

    /// Replaces the seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn weights_path(&self) -> PathBuf {
        self.weights.clone().unwrap_or_else(|| self.output_dir.join(format!("{}_weights.txt", self.model)))
    }
}

struct Entry {
    value: String,
    line: usize,
}

/// Raw `(section, key) → value` map with the line of every entry and header.
struct Raw {
    entries: BTreeMap<(String, String), Entry>,
    headers: BTreeMap<String, usize>,
}

fn config_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Config { line, msg: msg.into() }
}

fn parse_raw(text: &str) -> Result<Raw> {
    let mut entries = BTreeMap::new();
    let mut headers = BTreeMap::new();
    let mut section = String::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        let body = raw_line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        if let Some(name) = body.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or_else(|| config_err(line, "unterminated section header"))?.trim();
            if !KEYS.iter().any(|(s, _)| *s == name) || name.is_empty() {
                return Err(config_err(line, format!("unknown section [{name}]")));
            }
            if headers.insert(name.to_string(), line).is_some() {
                return Err(config_err(line, format!("section [{name}] repeated")));
            }
            section = name.to_string();
            continue;
        }
        let (key, value) = body.split_once('=').ok_or_else(|| config_err(line, format!("expected `key = value`, got `{body}`")))?;
        let (key, value) = (key.trim(), value.trim());
        let allowed = KEYS.iter().find(|(s, _)| *s == section).map(|(_, k)| *k).unwrap_or(&[]);
        if !allowed.contains(&key) {
            let place = if section.is_empty() { "top level".to_string() } else { format!("[{section}]") };
            return Err(config_err(line, format!("unknown key `{key}` in {place}")));
        }
        if value.is_empty() {
            return Err(config_err(line, format!("empty value for `{key}`")));
        }
        let prev = entries.insert((section.clone(), key.to_string()), Entry { value: value.to_string(), line });
        if prev.is_some() {
            return Err(config_err(line, format!("duplicate key `{key}`")));
        }
    }
    Ok(Raw { entries, headers })
}

impl Raw {
    fn get<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        match self.entries.get(&(section.to_string(), key.to_string())) {
            None => Ok(None),
            Some(e) => e.value.parse().map(Some).map_err(|_| config_err(e.line, format!("invalid value `{}` for `{key}`", e.value))),
        }
    }

    fn set<T: FromStr>(&self, section: &str, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.get(section, key)? {
            *slot = v;
        }
        Ok(())
    }

    fn list(&self, section: &str, key: &str) -> Result<Option<Vec<f64>>> {
        match self.entries.get(&(section.to_string(), key.to_string())) {
            None => Ok(None),
            Some(e) => e
                .value
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Some)
                .map_err(|_| config_err(e.line, format!("invalid number list `{}` for `{key}`", e.value))),
        }
    }

    /// Line to blame for a failed cross-key check in `section`.
    fn blame(&self, section: &str) -> usize {
        self.entries
            .iter()
            .filter(|((s, _), _)| s == section)
            .map(|(_, e)| e.line)
            .max()
            .or_else(|| self.headers.get(section).copied())
            .unwrap_or(0)
    }

    fn check(&self, section: &str, r: Result<()>) -> Result<()> {
        r.map_err(|e| config_err(self.blame(section), e.to_string()))
    }
}

impl FromStr for ExperimentConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let raw = parse_raw(text)?;
        let model: ModelKind = match raw.entries.get(&(String::new(), "model".into())) {
            None => return Err(config_err(0, "missing required key `model`")),
            Some(e) => e.value.parse().map_err(|err: Error| config_err(e.line, err.to_string()))?,
        };
        let seed = raw.get("", "seed")?.unwrap_or(0);
        let mut cfg = Self::defaults(model, seed);
        if let Some(e) = raw.entries.get(&(String::new(), "risk".into())) {
            cfg.risk = e.value.parse().map_err(|err: Error| config_err(e.line, err.to_string()))?;
        }
        raw.set("", "output_dir", &mut cfg.output_dir)?;
        cfg.weights = raw.get("", "weights")?;

        let b = &mut cfg.budgets;
        raw.set("budgets", "n_outer_eig", &mut b.n_outer_eig)?;
        raw.set("budgets", "n_inner_eig", &mut b.n_inner_eig)?;
        raw.set("budgets", "n_outer_cost", &mut b.n_outer_cost)?;
        raw.set("budgets", "n_posterior", &mut b.n_posterior)?;
        raw.check("budgets", cfg.budgets.validate())?;

        let t = &mut cfg.train;
        raw.set("train", "learning_rate", &mut t.learning_rate)?;
        raw.set("train", "epochs", &mut t.epochs)?;
        raw.set("train", "outer_batch", &mut t.outer_batch)?;
        raw.set("train", "inner_samples", &mut t.inner_samples)?;
        raw.set("train", "eval_every", &mut t.eval_every)?;
        raw.set("train", "eval_pairs", &mut t.eval_pairs)?;
        raw.set("train", "standardize_sims", &mut t.standardize_sims)?;
        raw.check("train", cfg.train.validate())?;

        let s = &mut cfg.search;
        s.xi_init = raw.list("search", "xi_init")?;
        raw.set("search", "first_step", &mut s.first_step)?;
        raw.set("search", "decay", &mut s.decay)?;
        raw.set("search", "max_iter", &mut s.max_iter)?;
        raw.set("search", "grad_tol", &mut s.grad_tol)?;
        raw.check("search", cfg.search.validate())?;

        raw.set("decision", "penalty", &mut cfg.penalty)?;
        raw.set("decision", "cost_slope", &mut cfg.cost_slope)?;
        raw.set("decision", "calibration_draws", &mut cfg.calibration_draws)?;
        raw.set("decision", "calibration_dose", &mut cfg.calibration_dose)?;
        raw.set("decision", "null_space_instances", &mut cfg.null_space_instances)?;
        let decision_ok = if !cfg.penalty.is_finite() || !(cfg.cost_slope > 0.0) {
            Err(Error::InvalidArgument("penalty must be finite and cost_slope positive".into()))
        } else if cfg.calibration_draws < 10 || !(cfg.calibration_dose > 0.0 && cfg.calibration_dose <= 1.0) {
            Err(Error::InvalidArgument("calibration needs at least 10 draws and a dose fraction in (0, 1]".into()))
        } else {
            Ok(())
        };
        raw.check("decision", decision_ok)?;

        let sl = &mut cfg.srcloc;
        raw.set("srcloc", "s0", &mut sl.s0)?;
        raw.set("srcloc", "c_base", &mut sl.c_base)?;
        raw.set("srcloc", "sigma_i", &mut sl.sigma_i)?;
        raw.set("srcloc", "sigma_phi", &mut sl.sigma_phi)?;
        raw.check("srcloc", cfg.srcloc.validate())?;

        let sq = &mut cfg.siqr;
        raw.set("siqr", "eps_rate", &mut sq.eps_rate)?;
        raw.set("siqr", "n_pop", &mut sq.n_pop)?;
        raw.set("siqr", "horizon", &mut sq.horizon)?;
        raw.set("siqr", "dt", &mut sq.dt)?;
        raw.set("siqr", "h_fd", &mut sq.h_fd)?;
        raw.set("siqr", "s0", &mut sq.init.s)?;
        raw.set("siqr", "xa0", &mut sq.init.x_a)?;
        raw.set("siqr", "xs0", &mut sq.init.x_s)?;
        if let Some(v) = raw.list("siqr", "grid")? {
            sq.grid = v;
        }
        if let Some(v) = raw.list("siqr", "prior_mu")? {
            sq.prior_mu = v;
        }
        if let Some(v) = raw.list("siqr", "prior_sigma")? {
            sq.prior_sigma = v;
        }
        raw.check("siqr", cfg.siqr.validate())?;

        let pk = &mut cfg.pk;
        raw.set("pk", "dose_ref", &mut pk.dose_ref)?;
        raw.set("pk", "dose_obs", &mut pk.dose_obs)?;
        raw.set("pk", "sigma_mult", &mut pk.sigma_mult)?;
        raw.set("pk", "sigma_add", &mut pk.sigma_add)?;
        raw.set("pk", "horizon", &mut pk.horizon)?;
        if let Some(v) = raw.list("pk", "grid")? {
            pk.grid = v;
        }
        if let Some(v) = raw.list("pk", "prior_mu")? {
            pk.prior_mu = v;
        }
        if let Some(v) = raw.list("pk", "prior_sigma")? {
            pk.prior_sigma = v;
        }
        raw.check("pk", cfg.pk.validate())?;
        Ok(cfg)
    }
}
