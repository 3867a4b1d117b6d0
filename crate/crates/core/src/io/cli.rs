use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::config::ExperimentConfig;
use super::csv::{fmt_sig, write_sweep_csv};
use super::weights::{load_weights, save_weights};
use crate::amortizer::{train_amortizer, EncoderWeights, HeadBounds};
use crate::checks;
use crate::decision::{DecisionProblem, DoseProblem, QuarantineProblem};
use crate::design::{grid_sweep, projected_gradient_search, CostSetup, Metric};
use crate::error::{Error, Result};
use crate::models::{ForwardModel, LinearGaussian, ModelKind, PkModel, SiqrModel, SrcLocModel};
use crate::prob::RandomStream;

#[derive(Debug, Parser)]
#[command(name = "goboed", version, about = "Goal-driven Bayesian experimental design")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the amortized posterior and write its weights.
    Train,
    /// Nested Monte Carlo EIG over the design grid.
    SweepEig,
    /// Expected robust decision cost over the design grid.
    SweepCost,
    /// Projected gradient search on the expected robust cost.
    OptimizeDesign,
    /// Null-space leakage on random projector instances.
    CheckTheorem1,
    /// Cross-module oracle checks.
    Selftest,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 on success, 1 on usage or configuration errors,
/// 2 on runtime failures.
pub fn run_command<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let threads = match std::env::var("GOBOED_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => {
                eprintln!("error: GOBOED_THREADS must be a positive integer, got `{v}`");
                return 1;
            }
        },
        Err(_) => 0,
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return 2;
        }
    };
    match pool.install(|| execute(&cli)) {
        Ok(()) => 0,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

fn load_config(cli: &Cli) -> std::result::Result<ExperimentConfig, Failure> {
    let path = cli.config.as_ref().ok_or_else(|| Failure::Config("--config PATH is required".into()))?;
    let cfg = ExperimentConfig::load(path)?;
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn execute(cli: &Cli) -> std::result::Result<(), Failure> {
    if let Command::Selftest = cli.command {
        let seed = match &cli.config {
            Some(_) => load_config(cli)?.seed,
            None => cli.seed.unwrap_or(0),
        };
        let lines = checks::selftest(cli.seed.unwrap_or(seed));
        for l in &lines {
            println!("{} {}: {}", if l.passed { "PASS" } else { "FAIL" }, l.name, l.detail);
        }
        return match lines.iter().filter(|l| !l.passed).count() {
            0 => Ok(()),
            n => Err(Failure::Runtime(format!("{n} self-check(s) failed"))),
        };
    }
    let cfg = load_config(cli)?;
    let root = RandomStream::new(cfg.seed);
    let model = build_model(&cfg)?;
    let out = |name: &str| cfg.output_dir.join(format!("{}_{name}", cfg.model));
    match cli.command {
        Command::Train => {
            let (phi, record) = train_amortizer(model.as_ref(), &cfg.train, HeadBounds::for_prior(model.prior()))?;
            let path = cfg.weights_path();
            save_weights(&phi, &path)?;
            let mut text = String::from("epoch,elbo,heldout_elbo\n");
            for (e, v) in record.epoch_elbo.iter().enumerate() {
                let held = record.eval_epochs.iter().position(|&x| x == e).map(|i| record.eval_elbo[i]).unwrap_or(f64::NAN);
                text.push_str(&format!("{e},{},{}\n", fmt_sig(*v, 10), fmt_sig(held, 10)));
            }
            write_text(&out("train.csv"), &text)?;
            println!("wrote {} ({} skipped pairs)", path.display(), record.skipped_pairs);
        }
        Command::SweepEig => {
            let grid = model.design_grid();
            let rows = grid_sweep(model.as_ref(), Metric::Eig, &grid, &cfg.budgets, root.split(1));
            report_failures(&rows);
            write_sweep_csv(&rows, &out("eig.csv"))?;
            println!("wrote {} ({} designs)", out("eig.csv").display(), rows.len());
            if cfg.model == ModelKind::SrcLoc {
                let rows = grid_sweep(model.as_ref(), Metric::PosteriorMse(1), &grid, &cfg.budgets, root.split(4));
                report_failures(&rows);
                write_sweep_csv(&rows, &out("mse.csv"))?;
                println!("wrote {}", out("mse.csv").display());
            }
        }
        Command::SweepCost => {
            let problem = build_problem(&cfg)?;
            let phi = obtain_weights(&cfg, model.as_ref())?;
            let setup = CostSetup { model: model.as_ref(), problem: problem.as_ref(), risk: cfg.risk, phi: &phi, penalty: cfg.penalty };
            let rows = grid_sweep(model.as_ref(), Metric::DesignLoss(setup), &model.design_grid(), &cfg.budgets, root.split(2));
            report_failures(&rows);
            write_sweep_csv(&rows, &out("cost.csv"))?;
            println!("wrote {} under {}", out("cost.csv").display(), cfg.risk);
        }
        Command::OptimizeDesign => {
            let problem = build_problem(&cfg)?;
            let phi = obtain_weights(&cfg, model.as_ref())?;
            let setup = CostSetup { model: model.as_ref(), problem: problem.as_ref(), risk: cfg.risk, phi: &phi, penalty: cfg.penalty };
            let trace = projected_gradient_search(&setup, &cfg.search, &cfg.budgets, root.split(3))?;
            let join = |v: &[f64]| v.iter().map(|x| fmt_sig(*x, 10)).collect::<Vec<_>>().join(";");
            let mut text = String::from("iter,xi,grad,xi_next,xi_hat,j_hat\n");
            for s in &trace {
                text.push_str(&format!("{},{},{},{},{},{}\n", s.iter, join(&s.xi), join(&s.grad), join(&s.xi_next), join(&s.xi_hat), fmt_sig(s.j_hat, 10)));
            }
            write_text(&out("search.csv"), &text)?;
            if let Some(last) = trace.last() {
                println!("final design {} (cost {})", join(&last.xi_hat), fmt_sig(last.j_hat, 10));
            }
        }
        Command::CheckTheorem1 => {
            let cases = checks::null_space_suite(cfg.null_space_instances, root.split(5))?;
            let mut text = String::from("instance,theta_dim,rank,risk,leakage,control_leakage\n");
            for (k, c) in cases.iter().enumerate() {
                text.push_str(&format!("{k},{},{},{},{},{}\n", c.theta_dim, c.rank, c.risk, fmt_sig(c.leakage, 10), fmt_sig(c.control_leakage, 10)));
            }
            write_text(&cfg.output_dir.join("null_space.csv"), &text)?;
            let worst = cases.iter().map(|c| c.leakage).fold(0.0, f64::max);
            let weakest = cases.iter().map(|c| c.control_leakage).fold(f64::INFINITY, f64::min);
            println!("max leakage {worst:.3e}; min control leakage {weakest:.3e}");
            if !(worst <= 1e-12 && weakest > 0.0) {
                return Err(Failure::Runtime("null-space leakage check failed".into()));
            }
        }
        Command::Selftest => unreachable!("handled above"),
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn report_failures(rows: &[crate::design::SweepRow]) {
    for r in rows.iter().filter(|r| r.error.is_some()) {
        eprintln!("warning: design {:?} failed: {}", r.xi, r.error.as_deref().unwrap_or(""));
    }
}

pub fn build_model(cfg: &ExperimentConfig) -> Result<Box<dyn ForwardModel>> {
    Ok(match cfg.model {
        ModelKind::SrcLoc => Box::new(SrcLocModel::new(cfg.srcloc.clone())?),
        ModelKind::Siqr => Box::new(SiqrModel::new(cfg.siqr.clone())?),
        ModelKind::Pk => Box::new(PkModel::new(cfg.pk.clone())?),
        ModelKind::LinearGaussian => Box::new(LinearGaussian::standard()),
    })
}

/// Downstream decision problem for models that carry one.
pub fn build_problem(cfg: &ExperimentConfig) -> Result<Box<dyn DecisionProblem>> {
    match cfg.model {
        ModelKind::Siqr => Ok(Box::new(QuarantineProblem::standard(cfg.siqr.eps_rate, cfg.siqr.init.s)?)),
        ModelKind::Pk => {
            let pk = PkModel::new(cfg.pk.clone())?;
            let (c_thresh, auc_min) = pk.calibrate_thresholds(cfg.calibration_draws, cfg.calibration_dose)?;
            Ok(Box::new(DoseProblem::new(cfg.cost_slope, cfg.pk.dose_ref, c_thresh, auc_min)?))
        }
        other => Err(Error::Config { line: 0, msg: format!("model {other} has no decision problem") }),
    }
}

/// Loads the configured weights, training and saving them first if absent.
pub fn obtain_weights(cfg: &ExperimentConfig, model: &dyn ForwardModel) -> Result<EncoderWeights> {
    let path = cfg.weights_path();
    if path.exists() {
        return load_weights(&path, cfg.model);
    }
    let (phi, _) = train_amortizer(model, &cfg.train, HeadBounds::for_prior(model.prior()))?;
    save_weights(&phi, &path)?;
    Ok(phi)
}
