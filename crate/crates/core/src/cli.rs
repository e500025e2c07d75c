//! Command-line front end. Flags override keys of the `--config` file,
//! which override built-in defaults.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;

use crate::config::{git_hash, Config};
use crate::diagnostics::{
    cross_section, error_metrics, mc_convergence_experiment, stability_experiment, tau_order_experiment,
    version1_martingale_check, version1_tail, Check, LinearGaussian, StabilitySettings, TauOrderSettings,
};
use crate::error::{Error, Result};
use crate::experiment::{forward_model, recon_mesh, reconstruct, synthesize, Method};
use crate::forward::{ForwardOperator, LinearOperator, ScalarIdentity};
use crate::gn::run_gn;
use crate::measure::MeasurementSet;
use crate::output::{cross_section_csv, field_csv, gn_log_csv, history_csv, raster_pgm, write_atomic, Manifest};
use crate::scenario::{rasterize_phantom, PhantomKind};
use crate::stochastic::{run, Characterization, Scheme, SolverConfig};

#[derive(Debug, Parser)]
#[command(name = "gainsearch", version, about = "Ensemble gain-based reconstruction for ultrasound-modulated optical tomography")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker thread cap; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize noisy measurements for the configured phantom.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Multiplicative noise level (0.01 = 1%).
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long, value_enum)]
        phantom: Option<PhantomKind>,
    },
    /// Reconstruct p from a measurement file.
    Reconstruct {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        scheme: Option<Method>,
        /// Per-particle rejection strategy.
        #[arg(long)]
        rs: bool,
        #[arg(long, value_enum)]
        characterization: Option<Characterization>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        phantom: Option<PhantomKind>,
    },
    /// Run the numerical verification suites.
    Diagnose {
        #[arg(value_enum)]
        suite: Suite,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Scalar demonstration problems.
    Toy {
        #[arg(value_enum)]
        problem: ToyProblem,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Scheme::Ksg)]
        scheme: Scheme,
        /// Centre of the initial ensemble.
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        p0: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Stability,
    #[value(name = "mc_rate")]
    McRate,
    #[value(name = "tau_order")]
    TauOrder,
    Martingale,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ToyProblem {
    Quadratic,
    #[value(name = "linear_gaussian")]
    LinearGaussian,
}

/// Outcome of a command that ran to completion.
pub enum Outcome {
    Ok,
    ChecksFailed,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 || rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            eprintln!("error: cannot set up {n} worker threads");
            return 2;
        }
    }
    match execute(&cli) {
        Ok(Outcome::Ok) => 0,
        Ok(Outcome::ChecksFailed) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Parse { .. } => 2,
                _ => 1,
            }
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<(Config, String)> {
    match path {
        Some(p) => {
            let bytes = std::fs::read(p)?;
            let cfg = Config::load(p)?;
            Ok((cfg, git_hash(&bytes)))
        }
        None => Ok((Config::default(), git_hash(b""))),
    }
}

fn start(cli: &Cli, out: &Path, command: &str, args: Vec<String>, seed: u64, hash: String, cfg: &Config) -> Result<()> {
    std::fs::create_dir_all(out)?;
    Manifest {
        command: command.into(),
        args,
        config_path: cli.config.clone(),
        config_hash: hash,
        seed,
        out_dir: out.to_path_buf(),
        version: env!("CARGO_PKG_VERSION").into(),
    }
    .write(out)?;
    write_atomic(&out.join("config.toml"), cfg.to_toml().as_bytes())
}

fn write_summary(out: &Path, checks: &[Check], extra: &[String]) -> Result<Outcome> {
    let mut text = String::new();
    for l in extra {
        text.push_str(l);
        text.push('\n');
    }
    for c in checks {
        text.push_str(&c.line());
        text.push('\n');
    }
    write_atomic(&out.join("summary.txt"), text.as_bytes())?;
    print!("{text}");
    Ok(if checks.iter().all(|c| c.passed) { Outcome::Ok } else { Outcome::ChecksFailed })
}

pub fn execute(cli: &Cli) -> Result<Outcome> {
    let (mut cfg, hash) = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::GenerateData { out, seed, noise, phantom } => {
            if let Some(k) = phantom {
                cfg.phantom.kind = *k;
            }
            if let Some(n) = noise {
                cfg.phantom.noise_frac = *n;
            }
            cfg.validate()?;
            let seed = seed.unwrap_or(cfg.solver.seed);
            let args = vec![format!("phantom={:?}", cfg.phantom.kind), format!("noise={}", cfg.phantom.noise_frac)];
            start(cli, out, "generate-data", args, seed, hash, &cfg)?;
            let gen = synthesize(&cfg, cfg.phantom.noise_frac, seed)?;
            let mut bytes = Vec::new();
            gen.set.write_csv(&mut bytes)?;
            write_atomic(&out.join("data.csv"), &bytes)?;
            if gen.all_zero {
                eprintln!("warning: every clean measurement is zero");
            }
            println!("wrote {} measurements to {}", gen.set.len(), out.join("data.csv").display());
            Ok(Outcome::Ok)
        }
        Command::Reconstruct { data, out, scheme, rs, characterization, seed, phantom } => {
            if let Some(k) = phantom {
                cfg.phantom.kind = *k;
            }
            if let Some(c) = characterization {
                cfg.solver.characterization = *c;
            }
            let method = scheme.unwrap_or(match cfg.solver.scheme {
                Scheme::Ksg => Method::Ksg,
                Scheme::Lsg => Method::Lsg,
            });
            if method != Method::Gn {
                cfg.solver.scheme = if method == Method::Ksg { Scheme::Ksg } else { Scheme::Lsg };
            }
            cfg.solver.rejection_strategy |= *rs;
            cfg.validate()?;
            let seed = seed.unwrap_or(cfg.solver.seed);
            let args = vec![
                format!("data={}", data.display()),
                format!("scheme={}", method.name()),
                format!("rs={}", cfg.solver.rejection_strategy),
                format!("characterization={:?}", cfg.solver.characterization),
            ];
            start(cli, out, "reconstruct", args, seed, hash, &cfg)?;
            let set = MeasurementSet::read_csv_file(data)?;
            let mesh = recon_mesh(&cfg)?;
            let fwd = forward_model(&cfg, mesh)?;
            let rec = reconstruct(&cfg, &fwd, &set, method, None, seed)?;
            let mesh = fwd.mesh();
            write_atomic(&out.join("field.csv"), field_csv(&rec.field).as_bytes())?;
            if let Some(s) = &rec.stochastic {
                write_atomic(&out.join("history.csv"), history_csv(&s.history).as_bytes())?;
            }
            if let Some(g) = &rec.gn {
                write_atomic(&out.join("gn_log.csv"), gn_log_csv(g.chi0, &g.history).as_bytes())?;
            }
            let nodal = rec.field.to_nodal(mesh.n_nodes());
            let raster = raster_pgm(mesh, &nodal, cfg.ir(), cfg.solver.raster_size);
            write_atomic(&out.join("raster.pgm"), &raster)?;
            let [a, b] = cfg.cross_section_line();
            let cs = cross_section(mesh, &nodal, a, b, cfg.solver.cross_section_samples);
            write_atomic(&out.join("cross_section.csv"), cross_section_csv(&cs).as_bytes())?;
            let truth = rasterize_phantom(&cfg.phantom(), mesh);
            let m = error_metrics(&rec.field.values, &truth.values)?;
            let metrics = format!(
                "relative_l2,contrast_recon,contrast_truth,contrast_rel_error,background_rel_rms\n{},{},{},{},{}\n",
                m.relative_l2, m.contrast_recon, m.contrast_truth, m.contrast_rel_error, m.background_rel_rms
            );
            write_atomic(&out.join("metrics.csv"), metrics.as_bytes())?;
            let stop = match (&rec.stochastic, &rec.gn) {
                (Some(s), _) => format!("{} iterations, alpha_1 = {}, stop {:?}", s.history.len(), cfg.alpha_1(), s.stop),
                (_, Some(g)) => format!("{} iterations, converged = {}", g.history.len(), g.converged),
                _ => String::new(),
            };
            println!("{}: {stop}; relative L2 error vs configured phantom {:.4}", method.name(), m.relative_l2);
            Ok(Outcome::Ok)
        }
        Command::Diagnose { suite, out, seed } => {
            let args = vec![format!("suite={suite:?}")];
            start(cli, out, "diagnose", args, *seed, hash, &cfg)?;
            run_diagnostics(&cfg, *suite, out, *seed)
        }
        Command::Toy { problem, out, seed, scheme, p0 } => {
            let args = vec![format!("problem={problem:?}"), format!("scheme={scheme:?}"), format!("p0={p0}")];
            start(cli, out, "toy", args, *seed, hash, &cfg)?;
            match problem {
                ToyProblem::Quadratic => toy_quadratic(out, *seed, *scheme, *p0),
                ToyProblem::LinearGaussian => toy_linear_gaussian(&cfg, out, *seed),
            }
        }
    }
}

fn seeds(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| base.wrapping_add(i)).collect()
}

fn run_diagnostics(cfg: &Config, suite: Suite, out: &Path, seed: u64) -> Result<Outcome> {
    let d = &cfg.diagnostics;
    let want = |s: Suite| suite == s || suite == Suite::All;
    let mut checks = Vec::new();
    if want(Suite::Stability) {
        let settings = StabilitySettings {
            dtau_grid: d.stability_dtau.clone(),
            epsilon_frac: d.stability_epsilon,
            seeds: seeds(seed, d.stability_seeds),
            iterations: d.stability_iterations,
            solver: SolverConfig::default(),
        };
        let r = stability_experiment(&ScalarIdentity, &[1.0], &[0.0], &settings)?;
        write_atomic(&out.join("stability.csv"), r.to_csv().as_bytes())?;
        checks.extend(r.checks());
    }
    if want(Suite::McRate) {
        let r = mc_convergence_experiment(&LinearGaussian::default(), &d.mc_grid, d.mc_replicates, seed)?;
        write_atomic(&out.join("mc_rate.csv"), r.to_csv().as_bytes())?;
        checks.extend(r.checks());
    }
    if want(Suite::TauOrder) {
        let settings = TauOrderSettings {
            dtau: d.tau_dtau,
            final_tau: d.tau_final,
            refinements: d.tau_refinements.clone(),
            seeds: seeds(seed, d.tau_seeds),
            solver: SolverConfig { alpha_1: 0.0, ..SolverConfig::default() },
        };
        let r = tau_order_experiment(&ScalarIdentity, &[0.0], &[1.0], &settings)?;
        write_atomic(&out.join("tau_order.csv"), r.to_csv().as_bytes())?;
        checks.extend(r.checks());
    }
    if want(Suite::Martingale) {
        let tail = version1_tail(0.0, d.martingale_dtau, d.martingale_tail, seed);
        let r = version1_martingale_check(&tail, d.martingale_dtau, 0.0)?;
        write_atomic(&out.join("martingale.csv"), r.to_csv().as_bytes())?;
        checks.extend(r.checks());
    }
    write_summary(out, &checks, &[])
}

fn estimate_csv(est: &[f64]) -> String {
    let mut s = String::from("param,value\n");
    for (i, v) in est.iter().enumerate() {
        s.push_str(&format!("{i},{v:e}\n"));
    }
    s
}

fn toy_quadratic(out: &Path, seed: u64, scheme: Scheme, p0: f64) -> Result<Outcome> {
    let cfg = SolverConfig { scheme, seed, ..SolverConfig::default() };
    let r = run(&ScalarIdentity, &[0.0], &[p0], &cfg)?;
    write_atomic(&out.join("history.csv"), history_csv(&r.history).as_bytes())?;
    write_atomic(&out.join("estimate.csv"), estimate_csv(&r.estimate).as_bytes())?;
    let m = r.estimate[0];
    let checks = [Check::new(
        "toy_converged",
        m.abs() < 0.05,
        format!("|ensemble mean| = {:.4e} after {} iterations", m.abs(), r.history.len()),
    )];
    write_summary(out, &checks, &[])
}

/// Linear toy for the Gauss-Newton log: three noisy observations of two parameters.
pub fn linear_toy() -> (LinearOperator, Vec<f64>) {
    let a = LinearOperator { a: DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -0.3, 2.0, 0.7, 0.1]) };
    let mut data = a.evaluate(&[1.5, 0.5]).expect("linear toy evaluates");
    for (d, e) in data.iter_mut().zip([0.05, -0.03, 0.04]) {
        *d += e;
    }
    (a, data)
}

fn toy_linear_gaussian(cfg: &Config, out: &Path, seed: u64) -> Result<Outcome> {
    let prob = LinearGaussian::default();
    let n_e = 10_000;
    let m = prob.lsg_mean(n_e, seed)?;
    let kalman = prob.posterior_mean();
    let rel = (m - kalman).abs() / kalman.abs();
    write_atomic(
        &out.join("linear_gaussian.csv"),
        format!("n_e,ensemble_mean,kalman_mean,relative_error\n{n_e},{m},{kalman},{rel}\n").as_bytes(),
    )?;
    let (a, data) = linear_toy();
    let g = run_gn(&a, &data, &[0.0, 0.0], &cfg.solver.gn)?;
    write_atomic(&out.join("gn_log.csv"), gn_log_csv(g.chi0, &g.history).as_bytes())?;
    write_atomic(&out.join("estimate.csv"), estimate_csv(&g.estimate).as_bytes())?;
    let checks = [
        Check::new("lsg_kalman", rel <= 0.05, format!("ensemble mean {m:.5} vs Kalman {kalman:.5} at n_E = {n_e}")),
        Check::new("gn_converged", g.converged, format!("{} Gauss-Newton iterations", g.history.len())),
    ];
    write_summary(out, &checks, &[])
}
