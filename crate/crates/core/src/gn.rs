//! Tikhonov-regularized Gauss-Newton baseline with an adaptively halved
//! regularization weight.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::ForwardOperator;
use crate::stochastic::measurement_scale;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMode {
    #[default]
    FiniteDifference,
    /// Reserved; not implemented.
    AdjointPlaceholder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GnConfig {
    /// Fixed initial beta; the maximum diagonal entry of J^T J when absent.
    pub beta_init: Option<f64>,
    pub beta_decay: f64,
    /// Stop when the relative change of chi, in percent, falls below this.
    pub stop_threshold: f64,
    pub max_iters: usize,
    pub jacobian_mode: JacobianMode,
    /// Consecutive increases of chi that abort the run.
    pub max_increases: usize,
}

impl Default for GnConfig {
    fn default() -> Self {
        GnConfig {
            beta_init: None,
            beta_decay: 2.0,
            stop_threshold: 0.1,
            max_iters: 50,
            jacobian_mode: JacobianMode::FiniteDifference,
            max_increases: 5,
        }
    }
}

impl GnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_decay > 1.0) {
            return Err(Error::Config("beta_decay must exceed 1".into()));
        }
        if !(self.stop_threshold > 0.0) {
            return Err(Error::Config("stop_threshold must be positive".into()));
        }
        if let Some(b) = self.beta_init {
            if !(b > 0.0) {
                return Err(Error::Config("beta_init must be positive".into()));
            }
        }
        if self.max_iters == 0 || self.max_increases == 0 {
            return Err(Error::Config("iteration limits must be positive".into()));
        }
        Ok(())
    }
}

/// Forward-difference Jacobian with steps 1e-6 max(|p_i|, 1).
pub fn jacobian<M: ForwardOperator + ?Sized>(model: &M, p: &[f64], base: &[f64]) -> Result<DMatrix<f64>> {
    let nm = model.n_measurements();
    let cols: Vec<Vec<f64>> = (0..p.len())
        .into_par_iter()
        .map(|i| {
            let h = 1e-6 * p[i].abs().max(1.0);
            let mut q = p.to_vec();
            q[i] += h;
            let step = q[i] - p[i];
            let f = model.evaluate(&q).map_err(|e| {
                Error::Numerical(format!("forward failure in Jacobian column {i}: {e}"))
            })?;
            Ok(f.iter().zip(base).map(|(a, b)| (a - b) / step).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_fn(nm, p.len(), |d, i| cols[i][d]))
}

/// Solves (J^T J + beta I) delta = J^T r and returns p - delta.
pub fn gn_step(p: &[f64], jac: &DMatrix<f64>, residual: &[f64], beta: f64) -> Result<Vec<f64>> {
    if jac.ncols() != p.len() || jac.nrows() != residual.len() {
        return Err(Error::Dimension("Jacobian shape does not match p and residual".into()));
    }
    if !(beta >= 0.0) {
        return Err(Error::Config("beta must be nonnegative".into()));
    }
    let mut h = jac.transpose() * jac;
    for i in 0..h.nrows() {
        h[(i, i)] += beta;
    }
    let g = jac.transpose() * DVector::from_column_slice(residual);
    let chol = h
        .cholesky()
        .ok_or_else(|| Error::Numerical("normal matrix is singular".into()))?;
    let delta = chol.solve(&g);
    Ok(p.iter().zip(delta.iter()).map(|(a, d)| a - d).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GnRecord {
    pub k: usize,
    pub chi: f64,
    /// Beta used for this step.
    pub beta: f64,
    pub decreased: bool,
}

#[derive(Debug, Clone)]
pub struct GnResult {
    pub estimate: Vec<f64>,
    /// Objective at the start point.
    pub chi0: f64,
    pub history: Vec<GnRecord>,
    pub converged: bool,
    pub measurement_scale: f64,
}

/// Gauss-Newton from `p0`. Measurements are divided by the median data
/// modulus, so chi is reported in those units.
pub fn run_gn<M: ForwardOperator + ?Sized>(
    model: &M,
    data: &[f64],
    p0: &[f64],
    cfg: &GnConfig,
) -> Result<GnResult> {
    cfg.validate()?;
    if cfg.jacobian_mode == JacobianMode::AdjointPlaceholder {
        return Err(Error::Config("adjoint Jacobian mode is not implemented".into()));
    }
    if data.len() != model.n_measurements() || p0.len() != model.n_params() {
        return Err(Error::Dimension("data or start point does not match the model".into()));
    }
    let s_m = measurement_scale(data);
    let y: Vec<f64> = data.iter().map(|v| v / s_m).collect();
    let eval = |p: &[f64]| -> Result<Vec<f64>> {
        Ok(model.evaluate(p)?.into_iter().map(|v| v / s_m).collect())
    };
    let chi_of = |f: &[f64]| -> f64 { f.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum() };

    let mut p = p0.to_vec();
    let mut f = eval(&p)?;
    let mut chi = chi_of(&f);
    let chi0 = chi;
    let mut beta = cfg.beta_init;
    let mut history = Vec::new();
    let mut increases = 0usize;
    let mut converged = false;
    for k in 1..=cfg.max_iters {
        let jac = jacobian(model, &p, &f.iter().map(|v| v * s_m).collect::<Vec<_>>())
            .map_err(|e| e.at_iteration(k))?
            / s_m;
        let b = *beta.get_or_insert_with(|| {
            (jac.transpose() * &jac).diagonal().iter().copied().fold(0.0, f64::max)
        });
        let residual: Vec<f64> = f.iter().zip(&y).map(|(a, b)| a - b).collect();
        let p_next = gn_step(&p, &jac, &residual, b).map_err(|e| e.at_iteration(k))?;
        let f_next = eval(&p_next).map_err(|e| e.at_iteration(k))?;
        let chi_next = chi_of(&f_next);
        let decreased = chi_next < chi;
        history.push(GnRecord { k, chi: chi_next, beta: b, decreased });
        let rel_pct = if chi > 0.0 { 100.0 * ((chi_next - chi) / chi).abs() } else { 0.0 };
        p = p_next;
        f = f_next;
        let prev = chi;
        chi = chi_next;
        if decreased {
            beta = Some(b / cfg.beta_decay);
            increases = 0;
        } else {
            increases += 1;
        }
        if prev == 0.0 || rel_pct < cfg.stop_threshold {
            converged = true;
            break;
        }
        if increases >= cfg.max_increases {
            return Err(Error::Numerical(format!(
                "chi increased for {increases} consecutive iterations (chi = {chi:e})"
            ))
            .at_iteration(k));
        }
    }
    Ok(GnResult { estimate: p, chi0, history, converged, measurement_scale: s_m })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::LinearOperator;

    fn op() -> LinearOperator {
        LinearOperator {
            a: DMatrix::from_row_slice(4, 3, &[2.0, 0.1, 0.0, 0.3, 1.5, 0.2, 0.0, 0.4, 1.0, 1.0, 1.0, 1.0]),
        }
    }

    #[test]
    fn jacobian_of_linear_map() {
        let a = op();
        let p = [0.3, -2.0, 5.0];
        let base = a.evaluate(&p).unwrap();
        let j = jacobian(&a, &p, &base).unwrap();
        assert_eq!(j.shape(), (4, 3));
        for (x, y) in j.iter().zip(a.a.iter()) {
            assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0));
        }
    }

    #[test]
    fn step_examples() {
        let j = DMatrix::from_row_slice(1, 1, &[2.0]);
        assert_eq!(gn_step(&[1.0], &j, &[4.0], 0.0).unwrap(), vec![1.0 - 2.0]);
        assert_eq!(gn_step(&[1.0], &j, &[0.0], 0.5).unwrap(), vec![1.0]);
        let far = gn_step(&[1.0], &j, &[4.0], 1e12).unwrap()[0];
        assert!((far - 1.0).abs() < 1e-10);
    }

    #[test]
    fn fixed_beta_linear_step_is_tikhonov_solution() {
        let a = op();
        let data = [1.0, 2.0, 3.0, 4.0];
        let p0 = [0.5, 0.5, 0.5];
        let beta = 0.3;
        let r: Vec<f64> = a.evaluate(&p0).unwrap().iter().zip(&data).map(|(f, m)| f - m).collect();
        let got = gn_step(&p0, &a.a, &r, beta).unwrap();
        // closed form: argmin |A p - M|^2 + beta |p - p0|^2
        let lhs = a.a.transpose() * &a.a + DMatrix::identity(3, 3) * beta;
        let rhs = a.a.transpose() * DVector::from_column_slice(&data) + DVector::from_column_slice(&p0) * beta;
        let want = lhs.lu().solve(&rhs).unwrap();
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() <= 1e-10 * w.abs().max(1.0));
        }
    }

    #[test]
    fn converges_to_known_minimizer() {
        let a = op();
        let truth = [1.0, -0.5, 2.0];
        let data = a.evaluate(&truth).unwrap();
        let cfg = GnConfig { max_iters: 20, ..Default::default() };
        let r = run_gn(&a, &data, &[0.0; 3], &cfg).unwrap();
        assert!(r.history.len() <= 20);
        for (e, t) in r.estimate.iter().zip(&truth) {
            assert!((e - t).abs() < 1e-6, "{:?}", r.estimate);
        }
    }

    #[test]
    fn beta_protocol_on_noisy_linear_toy() {
        let a = op();
        let data = [2.3, -0.4, 2.1, 2.9];
        let r = run_gn(&a, &data, &[0.0; 3], &GnConfig::default()).unwrap();
        assert!(r.converged);
        let j = a.a.clone() / r.measurement_scale;
        let max_diag = (j.transpose() * &j).diagonal().max();
        assert!((r.history[0].beta - max_diag).abs() <= 1e-6 * max_diag);
        for w in r.history.windows(2) {
            let want = if w[0].decreased { w[0].beta / 2.0 } else { w[0].beta };
            assert_eq!(w[1].beta, want);
        }
        let last = r.history.len() - 1;
        let prev = if last == 0 { r.chi0 } else { r.history[last - 1].chi };
        assert!(100.0 * ((r.history[last].chi - prev) / prev).abs() < 0.1);
    }

    #[test]
    fn optimal_start_stops_at_first_iteration() {
        let a = op();
        let truth = [1.0, 2.0, 3.0];
        let data = a.evaluate(&truth).unwrap();
        let r = run_gn(&a, &data, &truth, &GnConfig::default()).unwrap();
        assert_eq!(r.history.len(), 1);
        assert!(r.converged);
    }
}
