//! Additive gain updates. Forward evaluations are stored column-wise,
//! one column of length n_M per particle.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Deviations from the first column. Identical columns give exact zeros.
fn shifted(x: &DMatrix<f64>) -> DMatrix<f64> {
    let first = x.column(0).clone_owned();
    let mut d = x.clone();
    for mut c in d.column_iter_mut() {
        c -= &first;
    }
    d
}

fn row_means(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.ncols() as f64;
    DVector::from_iterator(x.nrows(), x.row_iter().map(|r| r.iter().sum::<f64>() / n))
}

/// Ensemble cross-covariance pi(p M) - pi(p) pi(M), n_p x n_M.
pub fn ensemble_cross_covariance(p: &DMatrix<f64>, h: &DMatrix<f64>) -> DMatrix<f64> {
    let n = p.ncols() as f64;
    let dp = shifted(p);
    let dh = shifted(h);
    let mp = row_means(&dp);
    let mh = row_means(&dh);
    (&dp * dh.transpose()) / n - mp * mh.transpose()
}

fn check_shapes(p: &DMatrix<f64>, h: &DMatrix<f64>, n_obs: usize) -> Result<()> {
    if p.ncols() < 2 {
        return Err(Error::Config("gain updates need at least two particles".into()));
    }
    if h.ncols() != p.ncols() || h.nrows() != n_obs {
        return Err(Error::Dimension(format!(
            "forward evaluations {}x{} for {} particles and {} observations",
            h.nrows(),
            h.ncols(),
            p.ncols(),
            n_obs
        )));
    }
    Ok(())
}

/// (1 + alpha) Cov(p, M) (dM - M(p_j) dt) for every particle.
pub fn ksg_correction(
    predicted: &DMatrix<f64>,
    forward: &DMatrix<f64>,
    delta_m: &[f64],
    delta_tau: f64,
    alpha: f64,
) -> Result<DMatrix<f64>> {
    check_shapes(predicted, forward, delta_m.len())?;
    let cov = ensemble_cross_covariance(predicted, forward);
    let innov = DMatrix::from_fn(forward.nrows(), forward.ncols(), |d, j| {
        delta_m[d] - forward[(d, j)] * delta_tau
    });
    Ok((cov * innov) * (1.0 + alpha))
}

pub fn ksg_update(
    predicted: &DMatrix<f64>,
    forward: &DMatrix<f64>,
    delta_m: &[f64],
    delta_tau: f64,
    alpha: f64,
) -> Result<DMatrix<f64>> {
    Ok(predicted + ksg_correction(predicted, forward, delta_m, delta_tau, alpha)?)
}

/// G = P M^T (M M^T + sigma_eta^2 I)^-1 with 1/sqrt(n_E - 1) scaled deviations.
pub fn lsg_gain(predicted: &DMatrix<f64>, forward: &DMatrix<f64>, sigma_eta: f64) -> Result<DMatrix<f64>> {
    if !(sigma_eta > 0.0) {
        return Err(Error::Config("least-squares gain needs sigma_eta > 0".into()));
    }
    let scale = 1.0 / ((predicted.ncols() - 1) as f64).sqrt();
    let dev = |x: &DMatrix<f64>| {
        let mut d = shifted(x);
        let m = row_means(&d);
        for mut c in d.column_iter_mut() {
            c -= &m;
        }
        d * scale
    };
    let pp = dev(predicted);
    let mm = dev(forward);
    let mut s = &mm * mm.transpose();
    for i in 0..s.nrows() {
        s[(i, i)] += sigma_eta * sigma_eta;
    }
    let chol = s
        .cholesky()
        .ok_or_else(|| Error::Numerical("innovation covariance is not positive definite".into()))?;
    // G^T = S^-1 M P^T
    let gt = chol.solve(&(&mm * pp.transpose()));
    Ok(gt.transpose())
}

pub fn lsg_update(
    predicted: &DMatrix<f64>,
    forward: &DMatrix<f64>,
    m_next: &[f64],
    sigma_eta: f64,
    alpha: f64,
) -> Result<DMatrix<f64>> {
    check_shapes(predicted, forward, m_next.len())?;
    let g = lsg_gain(predicted, forward, sigma_eta)?;
    let innov = DMatrix::from_fn(forward.nrows(), forward.ncols(), |d, j| m_next[d] - forward[(d, j)]);
    Ok(predicted + (g * innov) * (1.0 + alpha))
}
