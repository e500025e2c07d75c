//! Numerical experiments on the ensemble search: stability under data
//! perturbations, Monte Carlo and step-size convergence, the Version-1
//! martingale tail, and reconstruction error metrics.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward::ForwardOperator;
use crate::mesh::Mesh;
use crate::stochastic::{initial_ensemble, lsg_update, run, run_traced, BrownianStreams, SolverConfig, PSEUDO_STREAM};

pub const MIN_HELLINGER_SAMPLES: usize = 100;
pub const MIN_TAIL: usize = 500;

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)
}

/// Least-squares slope of ln(y) against ln(x).
pub fn log_log_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::Config("a slope fit needs at least three grid points".into()));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::Numerical("slope fit needs positive finite values".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let (mx, my) = (mean(&lx), mean(&ly));
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    Ok(sxy / sxx)
}

/// A named pass/fail line for the plain-text summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: String) -> Self {
        Check { name: name.into(), passed, detail }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HellingerEstimate {
    pub distance: f64,
    pub std_error: f64,
    pub n: usize,
}

/// Monte Carlo Hellinger distance sqrt(E_Q[(sqrt L - sqrt L')^2] / 2) from
/// log-likelihood-ratio samples drawn under a common reference measure.
pub fn hellinger_empirical(log_l: &[f64], log_l_prime: &[f64]) -> Result<HellingerEstimate> {
    if log_l.len() != log_l_prime.len() {
        return Err(Error::Dimension(format!(
            "{} and {} likelihood samples",
            log_l.len(),
            log_l_prime.len()
        )));
    }
    let n = log_l.len();
    if n < MIN_HELLINGER_SAMPLES {
        return Err(Error::Config(format!("need at least {MIN_HELLINGER_SAMPLES} samples, got {n}")));
    }
    let terms: Vec<f64> = log_l
        .iter()
        .zip(log_l_prime)
        .map(|(a, b)| {
            let d = (0.5 * a).exp() - (0.5 * b).exp();
            0.5 * d * d
        })
        .collect();
    if terms.iter().any(|t| !t.is_finite()) {
        return Err(Error::Numerical("likelihood ratios overflow".into()));
    }
    let d2 = mean(&terms);
    let se_d2 = (variance(&terms) / n as f64).sqrt();
    let distance = d2.sqrt();
    let std_error = if distance > 0.0 { se_d2 / (2.0 * distance) } else { se_d2.sqrt() };
    Ok(HellingerEstimate { distance, std_error, n })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilitySettings {
    pub dtau_grid: Vec<f64>,
    /// Perturbation size relative to the data norm.
    pub epsilon_frac: f64,
    pub seeds: Vec<u64>,
    /// Iteration count k, the same for every step size.
    pub iterations: usize,
    pub solver: SolverConfig,
}

impl Default for StabilitySettings {
    fn default() -> Self {
        StabilitySettings {
            dtau_grid: vec![1.0, 0.25, 0.0625],
            epsilon_frac: 0.01,
            seeds: (0..5).collect(),
            iterations: 20,
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityRow {
    pub dtau: f64,
    pub seed: u64,
    pub discrepancy: f64,
    pub hellinger: f64,
    pub hellinger_se: f64,
    /// Upper bound on the discrepancy; may be infinite.
    pub bound: f64,
    pub bound_log10: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub epsilon: f64,
    pub rows: Vec<StabilityRow>,
    /// (dtau, median discrepancy) in grid order.
    pub medians: Vec<(f64, f64)>,
    /// Median discrepancy never increases as dtau shrinks.
    pub monotone: bool,
    /// Fraction of runs whose discrepancy is within the bound.
    pub bound_fraction: f64,
}

impl StabilityReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("dtau,seed,discrepancy,hellinger,hellinger_se,bound_log10\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:e},{:e},{:e},{}",
                r.dtau, r.seed, r.discrepancy, r.hellinger, r.hellinger_se, r.bound_log10
            );
        }
        s
    }

    pub fn checks(&self) -> Vec<Check> {
        let med: Vec<String> = self.medians.iter().map(|(d, m)| format!("{d}:{m:.3e}")).collect();
        vec![
            Check::new("stability_monotone", self.monotone, format!("median discrepancy by dtau {}", med.join(" "))),
            Check::new(
                "stability_bound",
                self.bound_fraction >= 0.9,
                format!("bound holds in {:.0}% of runs", 100.0 * self.bound_fraction),
            ),
        ]
    }
}

struct RunTrace {
    forward: Vec<DMatrix<f64>>,
    increments: Vec<Vec<f64>>,
}

fn col_norm(m: &DMatrix<f64>, j: usize) -> f64 {
    m.column(j).norm()
}

/// Runs the solver on the data and on a copy whose first entry is shifted by
/// epsilon * |data|, with shared Brownian paths, for every step size.
pub fn stability_experiment<M: ForwardOperator + ?Sized>(
    model: &M,
    data: &[f64],
    p0: &[f64],
    settings: &StabilitySettings,
) -> Result<StabilityReport> {
    if settings.dtau_grid.is_empty() || settings.seeds.is_empty() {
        return Err(Error::Config("stability experiment needs step sizes and seeds".into()));
    }
    let norm = data.iter().map(|v| v * v).sum::<f64>().sqrt();
    let epsilon = settings.epsilon_frac * norm;
    let mut perturbed = data.to_vec();
    perturbed[0] += epsilon;

    let jobs: Vec<(f64, u64)> = settings
        .dtau_grid
        .iter()
        .flat_map(|&d| settings.seeds.iter().map(move |&s| (d, s)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(dtau, seed)| {
            let cfg = SolverConfig {
                delta_tau: dtau,
                max_iters: settings.iterations,
                plateau_window: 0,
                seed,
                ..settings.solver.clone()
            };
            let traced = |d: &[f64]| -> Result<_> {
                let mut t = RunTrace { forward: Vec::new(), increments: Vec::new() };
                let r = run_traced(model, d, p0, &cfg, |s| {
                    t.forward.push(s.forward.clone());
                    t.increments.push(s.increment.to_vec());
                })?;
                Ok((r, t))
            };
            let (a, ta) = traced(data)?;
            let (b, tb) = traced(&perturbed)?;
            stability_row(dtau, seed, &a.ensemble.particles, &b.ensemble.particles, &ta, &tb)
        })
        .collect::<Result<Vec<_>>>()?;

    let medians: Vec<(f64, f64)> = settings
        .dtau_grid
        .iter()
        .map(|&d| {
            let v: Vec<f64> = rows.iter().filter(|r| r.dtau == d).map(|r| r.discrepancy).collect();
            (d, median(&v))
        })
        .collect();
    let mut order = medians.clone();
    order.sort_by(|a, b| b.0.total_cmp(&a.0));
    let monotone = order.windows(2).all(|w| w[1].1 <= w[0].1);
    let held = rows.iter().filter(|r| r.discrepancy <= r.bound).count();
    Ok(StabilityReport {
        epsilon,
        bound_fraction: held as f64 / rows.len() as f64,
        rows,
        medians,
        monotone,
    })
}

/// Shifts log-likelihood samples so their exponentials average to one.
fn normalize_log(l: &[f64]) -> Vec<f64> {
    let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + (l.iter().map(|v| (v - m).exp()).sum::<f64>() / l.len() as f64).ln();
    l.iter().map(|v| v - lse).collect()
}

fn stability_row(
    dtau: f64,
    seed: u64,
    final_a: &DMatrix<f64>,
    final_b: &DMatrix<f64>,
    ta: &RunTrace,
    tb: &RunTrace,
) -> Result<StabilityRow> {
    let n_e = final_a.ncols();
    let k = ta.forward.len();
    let f_a: Vec<f64> = (0..n_e).map(|j| final_a[(0, j)]).collect();
    let f_b: Vec<f64> = (0..n_e).map(|j| final_b[(0, j)]).collect();
    let discrepancy = (mean(&f_a) - mean(&f_b)).abs();

    // sup of |M(p)| over every sample seen by either run
    let sup = ta
        .forward
        .iter()
        .chain(&tb.forward)
        .flat_map(|h| (0..h.ncols()).map(move |j| col_norm(h, j)))
        .fold(0.0, f64::max);
    let sum_dm_max: f64 = ta
        .increments
        .iter()
        .zip(&tb.increments)
        .map(|(a, b)| {
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            na.max(nb)
        })
        .sum();

    // log Lambda = sum M(p) . dM - |M(p)|^2 dtau / 2, particle by particle
    let log_lambda = |t: &RunTrace| -> Vec<f64> {
        (0..n_e)
            .map(|j| {
                t.forward
                    .iter()
                    .zip(&t.increments)
                    .map(|(h, dm)| {
                        let c = h.column(j);
                        let dot: f64 = c.iter().zip(dm).map(|(a, b)| a * b).sum();
                        dot - 0.5 * c.norm_squared() * dtau
                    })
                    .sum()
            })
            .collect()
    };
    let (hellinger, hellinger_se) = if n_e >= MIN_HELLINGER_SAMPLES {
        let h = hellinger_empirical(&normalize_log(&log_lambda(ta)), &normalize_log(&log_lambda(tb)))?;
        (h.distance, h.std_error)
    } else {
        (f64::NAN, f64::NAN)
    };

    let kd = k as f64 * dtau;
    let ef2 = mean(&f_a.iter().map(|v| v * v).collect::<Vec<_>>()) + mean(&f_b.iter().map(|v| v * v).collect::<Vec<_>>());
    let ln_c1 = (k as f64 - 3.0) * std::f64::consts::LN_2 + (4.0 + sup * sup * kd).ln();
    let ln_bound = std::f64::consts::LN_2
        + 0.5 * ln_c1
        + 0.5 * ef2.ln()
        + 0.5 * sup * sum_dm_max
        + sup.ln()
        + 0.5 * kd.ln();
    Ok(StabilityRow {
        dtau,
        seed,
        discrepancy,
        hellinger,
        hellinger_se,
        bound: ln_bound.exp(),
        bound_log10: ln_bound / std::f64::consts::LN_10,
    })
}

/// Scalar linear-Gaussian problem y = h p + noise with a Gaussian prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearGaussian {
    pub prior_mean: f64,
    pub prior_sd: f64,
    pub h: f64,
    pub y: f64,
    pub noise_sd: f64,
}

impl Default for LinearGaussian {
    fn default() -> Self {
        LinearGaussian { prior_mean: 0.0, prior_sd: 1.0, h: 1.0, y: 1.0, noise_sd: 0.5 }
    }
}

impl LinearGaussian {
    pub fn kalman_gain(&self) -> f64 {
        let v = self.prior_sd * self.prior_sd;
        v * self.h / (self.h * self.h * v + self.noise_sd * self.noise_sd)
    }

    pub fn posterior_mean(&self) -> f64 {
        self.prior_mean + self.kalman_gain() * (self.y - self.h * self.prior_mean)
    }

    pub fn posterior_sd(&self) -> f64 {
        ((1.0 - self.kalman_gain() * self.h) * self.prior_sd * self.prior_sd).sqrt()
    }

    /// Ensemble mean after one least-squares-gain update of a prior ensemble.
    pub fn lsg_mean(&self, n_e: usize, seed: u64) -> Result<f64> {
        let mut streams = BrownianStreams::new(seed, n_e + 1, 1);
        let ens = initial_ensemble(&[self.prior_mean], self.prior_sd, n_e, &mut streams)?;
        let fwd = ens.particles.map(|p| self.h * p);
        let post = lsg_update(&ens.particles, &fwd, &[self.y], self.noise_sd, 0.0)?;
        Ok(post.row(0).sum() / n_e as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    /// What the grid varies.
    pub variable: String,
    pub grid: Vec<f64>,
    /// RMS error against the oracle at each grid point.
    pub errors: Vec<f64>,
    pub slope: f64,
    pub replicates: usize,
    /// Set when too few replicates make the RMS errors unreliable.
    pub high_variance: bool,
    /// Fraction of replicates whose error at the last grid point is below the first.
    pub paired_fraction: f64,
}

impl ConvergenceReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{},rms_error\n", self.variable);
        for (g, e) in self.grid.iter().zip(&self.errors) {
            let _ = writeln!(s, "{g},{e:e}");
        }
        s
    }

    pub fn checks(&self) -> Vec<Check> {
        let warn = if self.high_variance { " (high variance: few replicates)" } else { "" };
        vec![
            Check::new(
                "mc_rate_slope",
                (-0.7..=-0.3).contains(&self.slope),
                format!("slope {:.3} over {} grid points{warn}", self.slope, self.grid.len()),
            ),
            Check::new(
                "mc_rate_paired",
                self.paired_fraction >= 0.9,
                format!("largest ensemble better in {:.0}% of replicates", 100.0 * self.paired_fraction),
            ),
        ]
    }
}

/// RMS error of the one-step LSG ensemble mean against the Kalman mean over
/// an ensemble-size grid; replicate r uses the same seed at every size.
pub fn mc_convergence_experiment(
    problem: &LinearGaussian,
    n_e_grid: &[usize],
    replicates: usize,
    seed: u64,
) -> Result<ConvergenceReport> {
    if n_e_grid.len() < 3 {
        return Err(Error::Config("a slope fit needs at least three grid points".into()));
    }
    if replicates == 0 {
        return Err(Error::Config("need at least one replicate".into()));
    }
    let truth = problem.posterior_mean();
    let errs: Vec<Vec<f64>> = n_e_grid
        .par_iter()
        .map(|&n| {
            (0..replicates)
                .map(|r| Ok((problem.lsg_mean(n, seed.wrapping_mul(1_000_003).wrapping_add(r as u64))? - truth).abs()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let rms: Vec<f64> = errs.iter().map(|e| (e.iter().map(|x| x * x).sum::<f64>() / e.len() as f64).sqrt()).collect();
    let grid: Vec<f64> = n_e_grid.iter().map(|&n| n as f64).collect();
    let first = &errs[0];
    let last = &errs[errs.len() - 1];
    let better = first.iter().zip(last).filter(|(a, b)| b < a).count();
    Ok(ConvergenceReport {
        variable: "n_e".into(),
        slope: log_log_slope(&grid, &rms)?,
        grid,
        errors: rms,
        replicates,
        high_variance: replicates < 10,
        paired_fraction: better as f64 / replicates as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TauOrderSettings {
    pub dtau: f64,
    pub final_tau: f64,
    /// Refinement factors relative to `dtau`; the largest one is the reference.
    pub refinements: Vec<usize>,
    pub seeds: Vec<u64>,
    pub solver: SolverConfig,
}

impl Default for TauOrderSettings {
    fn default() -> Self {
        TauOrderSettings {
            dtau: 0.5,
            final_tau: 4.0,
            refinements: vec![1, 4, 16, 64],
            seeds: (0..10).collect(),
            solver: SolverConfig { alpha_1: 0.0, ..SolverConfig::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TauOrderReport {
    pub dtau: f64,
    pub refinements: Vec<usize>,
    /// errors[s][l]: |estimate at refinement l - reference| for seed s.
    pub errors: Vec<Vec<f64>>,
    pub seeds: Vec<u64>,
    /// Median of e(dtau) / e(dtau / refinement) for each non-reference refinement after the first.
    pub median_contraction: Vec<(usize, f64)>,
}

impl TauOrderReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,dtau,error\n");
        for (seed, row) in self.seeds.iter().zip(&self.errors) {
            for (r, e) in self.refinements.iter().zip(row) {
                let _ = writeln!(s, "{seed},{},{e:e}", self.dtau / *r as f64);
            }
        }
        s
    }

    pub fn contraction(&self, refinement: usize) -> Option<f64> {
        self.median_contraction.iter().find(|(r, _)| *r == refinement).map(|(_, c)| *c)
    }

    pub fn checks(&self) -> Vec<Check> {
        let mut out = Vec::new();
        if let Some(c4) = self.contraction(4) {
            out.push(Check::new("tau_order_contraction", c4 >= 1.5, format!("median e(dt)/e(dt/4) = {c4:.3}")));
            if let Some(c16) = self.contraction(16) {
                out.push(Check::new(
                    "tau_order_refinement",
                    c16 >= c4,
                    format!("median e(dt)/e(dt/16) = {c16:.3}"),
                ));
            }
        }
        out
    }
}

/// Final ensemble mean after `final_tau / dtau` steps, with Brownian
/// increments built from `substeps` draws so that runs at different step
/// sizes share one underlying path.
pub fn coupled_run<M: ForwardOperator + ?Sized>(
    model: &M,
    data: &[f64],
    p0: &[f64],
    solver: &SolverConfig,
    dtau: f64,
    substeps: usize,
    final_tau: f64,
) -> Result<Vec<f64>> {
    let steps = (final_tau / dtau).round();
    if !(steps >= 1.0) || ((steps * dtau) - final_tau).abs() > 1e-9 * final_tau {
        return Err(Error::Config(format!("final tau {final_tau} is not a multiple of {dtau}")));
    }
    let cfg = SolverConfig {
        delta_tau: dtau,
        substeps,
        max_iters: steps as usize,
        plateau_window: 0,
        ..solver.clone()
    };
    Ok(run(model, data, p0, &cfg)?.estimate)
}

/// |coarse - fine| final estimates for a nested step pair on a shared path.
pub fn coupled_pair_discrepancy<M: ForwardOperator + ?Sized>(
    model: &M,
    data: &[f64],
    p0: &[f64],
    solver: &SolverConfig,
    dtau_coarse: f64,
    dtau_fine: f64,
    final_tau: f64,
) -> Result<f64> {
    let ratio = dtau_coarse / dtau_fine;
    let r = ratio.round();
    if !(r >= 1.0) || (ratio - r).abs() > 1e-9 * r {
        return Err(Error::Config(format!("step sizes {dtau_coarse} and {dtau_fine} are not nested")));
    }
    let r = r as usize;
    let a = coupled_run(model, data, p0, solver, dtau_coarse, r, final_tau)?;
    let b = coupled_run(model, data, p0, solver, dtau_fine, 1, final_tau)?;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

pub fn tau_order_experiment<M: ForwardOperator + ?Sized>(
    model: &M,
    data: &[f64],
    p0: &[f64],
    settings: &TauOrderSettings,
) -> Result<TauOrderReport> {
    let refs = &settings.refinements;
    if refs.len() < 3 || refs[0] != 1 || refs.windows(2).any(|w| w[1] <= w[0] || w[1] % w[0] != 0) {
        return Err(Error::Config("refinements must start at 1 and be strictly nested".into()));
    }
    let finest = *refs.last().unwrap();
    let errors = settings
        .seeds
        .par_iter()
        .map(|&seed| {
            let solver = SolverConfig { seed, ..settings.solver.clone() };
            let est: Vec<Vec<f64>> = refs
                .iter()
                .map(|&r| {
                    let dt = settings.dtau / r as f64;
                    coupled_run(model, data, p0, &solver, dt, finest / r, settings.final_tau)
                })
                .collect::<Result<_>>()?;
            let reference = est.last().unwrap();
            Ok(est
                .iter()
                .map(|e| e.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let median_contraction = (1..refs.len() - 1)
        .map(|l| {
            let c: Vec<f64> = errors.iter().map(|e| e[0] / e[l]).collect();
            (refs[l], median(&c))
        })
        .collect();
    Ok(TauOrderReport {
        dtau: settings.dtau,
        refinements: refs.clone(),
        errors,
        seeds: settings.seeds.clone(),
        median_contraction,
    })
}

/// Objective tail chi_{k+1} = (p* + dB_{k-1} + dB_k)^2 of the converged
/// scalar toy with unit Brownian increments of variance `delta_tau`.
pub fn version1_tail(p_star: f64, delta_tau: f64, len: usize, seed: u64) -> Vec<f64> {
    let mut streams = BrownianStreams::new(seed, 1, 1);
    let db = streams.increment(PSEUDO_STREAM, len + 1, delta_tau);
    db.windows(2).map(|w| (p_star + w[0] + w[1]).powi(2)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleReport {
    pub n: usize,
    pub expected_mean: f64,
    pub mean: f64,
    pub std_error: f64,
    pub lag1: f64,
    pub expected_lag1: f64,
    pub lag2: f64,
    pub lag_tolerance: f64,
    pub increment_mean: f64,
    pub increment_se: f64,
}

impl MartingaleReport {
    pub fn mean_ok(&self) -> bool {
        (self.mean - self.expected_mean).abs() <= 3.0 * self.std_error
    }

    pub fn lags_ok(&self) -> bool {
        (self.lag1 - self.expected_lag1).abs() <= self.lag_tolerance && self.lag2.abs() <= self.lag_tolerance
    }

    pub fn increments_ok(&self) -> bool {
        self.increment_mean.abs() <= 3.0 * self.increment_se
    }

    pub fn checks(&self) -> Vec<Check> {
        vec![
            Check::new(
                "martingale_mean",
                self.mean_ok(),
                format!("tail mean {:.4e} vs {:.4e} +- {:.2e}", self.mean, self.expected_mean, 3.0 * self.std_error),
            ),
            Check::new(
                "martingale_lags",
                self.lags_ok(),
                format!(
                    "lag-1 {:.3} (expect {:.3}), lag-2 {:.3}, tolerance {:.3}",
                    self.lag1, self.expected_lag1, self.lag2, self.lag_tolerance
                ),
            ),
            Check::new(
                "martingale_increments",
                self.increments_ok(),
                format!("mean increment {:.3e} +- {:.2e}", self.increment_mean, 3.0 * self.increment_se),
            ),
        ]
    }

    pub fn to_csv(&self) -> String {
        format!(
            "n,expected_mean,mean,std_error,lag1,expected_lag1,lag2,increment_mean,increment_se\n{},{:e},{:e},{:e},{},{},{},{:e},{:e}\n",
            self.n,
            self.expected_mean,
            self.mean,
            self.std_error,
            self.lag1,
            self.expected_lag1,
            self.lag2,
            self.increment_mean,
            self.increment_se
        )
    }
}

fn autocorrelation(x: &[f64], lag: usize) -> f64 {
    let m = mean(x);
    let c0: f64 = x.iter().map(|v| (v - m) * (v - m)).sum();
    let c: f64 = x.iter().zip(&x[lag..]).map(|(a, b)| (a - m) * (b - m)).sum();
    c / c0
}

/// Checks a Version-1 objective tail for optimum `p_star`: mean
/// p*^2 + 2 dtau, lag-1 correlation from the shared increment, no lag-2
/// correlation, and zero-mean increments.
pub fn version1_martingale_check(chi: &[f64], delta_tau: f64, p_star: f64) -> Result<MartingaleReport> {
    let n = chi.len();
    if n < MIN_TAIL {
        return Err(Error::Config(format!("tail of {n} samples is shorter than {MIN_TAIL}")));
    }
    let m = mean(chi);
    let var = variance(chi);
    let lag1 = autocorrelation(chi, 1);
    let lag2 = autocorrelation(chi, 2);
    // 1-dependent sequence: only the lag-1 covariance adds to the variance of the mean
    let std_error = (var / n as f64 * (1.0 + 2.0 * lag1).max(0.0)).sqrt();
    let s2 = p_star * p_star;
    let expected_lag1 = (2.0 * delta_tau * delta_tau + 4.0 * s2 * delta_tau) / (8.0 * delta_tau * delta_tau + 8.0 * s2 * delta_tau);
    let lag_tolerance = 3.0 * ((1.0 + 2.0 * expected_lag1 * expected_lag1) / n as f64).sqrt();
    // the mean increment telescopes to (chi_n - chi_1) / (n - 1)
    let increment_mean = (chi[n - 1] - chi[0]) / (n - 1) as f64;
    let increment_se = (2.0 * var).sqrt() / (n - 1) as f64;
    Ok(MartingaleReport {
        n,
        expected_mean: s2 + 2.0 * delta_tau,
        mean: m,
        std_error,
        lag1,
        expected_lag1,
        lag2,
        lag_tolerance,
        increment_mean,
        increment_se,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorMetrics {
    pub relative_l2: f64,
    /// Inclusion peak over mean background of the reconstruction.
    pub contrast_recon: f64,
    pub contrast_truth: f64,
    /// |contrast_recon / contrast_truth - 1|.
    pub contrast_rel_error: f64,
    /// RMS of (recon - truth) / truth over background nodes.
    pub background_rel_rms: f64,
}

/// Metrics over IR nodes; background nodes are those at the minimum true value.
pub fn error_metrics(recon: &[f64], truth: &[f64]) -> Result<ErrorMetrics> {
    if recon.len() != truth.len() || truth.is_empty() {
        return Err(Error::Dimension(format!("{} reconstructed and {} true values", recon.len(), truth.len())));
    }
    let tmin = truth.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = 1e-12 * tmin.abs().max(f64::MIN_POSITIVE);
    let is_bg: Vec<bool> = truth.iter().map(|t| (t - tmin).abs() <= tol).collect();
    let has_inclusion = is_bg.iter().any(|b| !b);
    let pick = |v: &[f64], bg: bool| -> Vec<f64> {
        v.iter().zip(&is_bg).filter(|(_, b)| **b == bg).map(|(x, _)| *x).collect()
    };
    let contrast = |v: &[f64]| -> f64 {
        let peak = if has_inclusion { pick(v, false) } else { v.to_vec() }
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        peak / mean(&pick(v, true))
    };
    let num: f64 = recon.iter().zip(truth).map(|(r, t)| (r - t) * (r - t)).sum();
    let den: f64 = truth.iter().map(|t| t * t).sum();
    let bg_rel: Vec<f64> = recon
        .iter()
        .zip(truth)
        .zip(&is_bg)
        .filter(|(_, b)| **b)
        .map(|((r, t), _)| ((r - t) / t).powi(2))
        .collect();
    let contrast_recon = contrast(recon);
    let contrast_truth = contrast(truth);
    Ok(ErrorMetrics {
        relative_l2: (num / den).sqrt(),
        contrast_recon,
        contrast_truth,
        contrast_rel_error: (contrast_recon / contrast_truth - 1.0).abs(),
        background_rel_rms: mean(&bg_rel).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakLocation {
    pub center: [f64; 2],
    pub peak: [f64; 2],
    pub value: f64,
    pub distance: f64,
}

/// Location of the largest reconstructed value in each inclusion's Voronoi
/// cell (among the given centers) over the IR nodes.
pub fn inclusion_peaks(mesh: &Mesh, ir_nodes: &[usize], values: &[f64], centers: &[[f64; 2]]) -> Vec<PeakLocation> {
    let d2 = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    centers
        .iter()
        .enumerate()
        .map(|(c, &center)| {
            let mut best: Option<(f64, [f64; 2])> = None;
            for (&g, &v) in ir_nodes.iter().zip(values) {
                let x = mesh.nodes[g];
                let owner = (0..centers.len())
                    .min_by(|&a, &b| d2(x, centers[a]).total_cmp(&d2(x, centers[b])))
                    .unwrap();
                if owner == c && best.is_none_or(|(bv, _)| v > bv) {
                    best = Some((v, x));
                }
            }
            let (value, peak) = best.unwrap_or((f64::NAN, [f64::NAN; 2]));
            PeakLocation { center, peak, value, distance: d2(peak, center).sqrt() }
        })
        .collect()
}

/// (arclength, value) samples of a nodal field along the segment a -> b;
/// points outside the mesh give NaN.
pub fn cross_section(mesh: &Mesh, nodal: &[f64], a: [f64; 2], b: [f64; 2], samples: usize) -> Vec<(f64, f64)> {
    let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
    let n = samples.max(2);
    (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            let x = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
            (t * len, mesh.interpolate(nodal, x).unwrap_or(f64::NAN))
        })
        .collect()
}
