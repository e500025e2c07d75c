//! Annealing, rejection and error characterizations.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// alpha_{k+1} = alpha_k / exp(k).
pub fn anneal_step(alpha_k: f64, k: usize) -> f64 {
    assert!(k >= 1, "annealing index starts at 1");
    alpha_k / (k as f64).exp()
}

/// Outcome of the per-particle rejection test.
#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub accepted: DMatrix<f64>,
    pub flags: Vec<bool>,
    pub chi: Vec<f64>,
}

impl Rejection {
    pub fn n_accepted(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

/// Keeps candidate j only if its objective strictly improves on the last
/// accepted value; otherwise the predicted particle passes through and the
/// recorded objective is left as it was.
pub fn rejection_filter(
    prev_chi: &[f64],
    candidate_chi: &[f64],
    candidates: &DMatrix<f64>,
    predicted: &DMatrix<f64>,
) -> Rejection {
    let n = candidates.ncols();
    assert_eq!(prev_chi.len(), n);
    assert_eq!(candidate_chi.len(), n);
    assert_eq!(predicted.shape(), candidates.shape());
    let mut accepted = predicted.clone();
    let mut flags = vec![false; n];
    let mut chi = prev_chi.to_vec();
    for j in 0..n {
        if candidate_chi[j] < prev_chi[j] {
            accepted.set_column(j, &candidates.column(j));
            flags[j] = true;
            chi[j] = candidate_chi[j];
        }
    }
    Rejection { accepted, flags, chi }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Characterization {
    /// Misfits only.
    #[default]
    #[value(name = "version2_plain")]
    #[serde(rename = "version2_plain")]
    Plain,
    /// Misfits plus one row chi - E[chi].
    #[value(name = "version2_augmented_sum")]
    #[serde(rename = "version2_augmented_sum")]
    AugmentedSum,
    /// Misfits plus one row per measurement chi^d - E[chi^d].
    #[value(name = "version2_augmented_componentwise")]
    #[serde(rename = "version2_augmented_componentwise")]
    AugmentedComponentwise,
}

impl Characterization {
    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "version2_plain" | "plain" => Ok(Self::Plain),
            "version2_augmented_sum" | "augmented_sum" => Ok(Self::AugmentedSum),
            "version2_augmented_componentwise" | "augmented_componentwise" => {
                Ok(Self::AugmentedComponentwise)
            }
            _ => Err(Error::Config(format!("unknown characterization '{tag}'"))),
        }
    }

    pub fn n_chi_rows(&self, n_m: usize) -> usize {
        match self {
            Self::Plain => 0,
            Self::AugmentedSum => 1,
            Self::AugmentedComponentwise => n_m,
        }
    }

    /// Squared-misfit statistics of one prediction: empty, the total, or per component.
    pub fn chi_terms(&self, y: &[f64], h: &[f64]) -> Vec<f64> {
        match self {
            Self::Plain => Vec::new(),
            Self::AugmentedSum => vec![misfit_sq(y, h)],
            Self::AugmentedComponentwise => y.iter().zip(h).map(|(a, b)| (a - b) * (a - b)).collect(),
        }
    }

    /// Measurement functions seen by the gain: the chi rows enter with a
    /// minus sign so that observation minus prediction is the error vector.
    pub fn augmented_prediction(&self, y: &[f64], h: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = self.chi_terms(y, h).into_iter().map(|c| -c).collect();
        out.extend_from_slice(h);
        out
    }

    pub fn augmented_observation(&self, y: &[f64], e_chi_prev: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = e_chi_prev.iter().map(|c| -c).collect();
        out.extend_from_slice(y);
        out
    }
}

pub fn misfit_sq(y: &[f64], h: &[f64]) -> f64 {
    y.iter().zip(h).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Error vector e = {chi_{k+1} - E[chi_k], M - M(p)} for one particle.
pub fn build_error_vector(
    characterization: Characterization,
    y: &[f64],
    forward_j: &[f64],
    e_chi_prev: &[f64],
) -> Result<Vec<f64>> {
    if y.len() != forward_j.len() {
        return Err(Error::Dimension("observation and prediction lengths differ".into()));
    }
    let want = characterization.n_chi_rows(y.len());
    if e_chi_prev.len() != want {
        return Err(Error::Dimension(format!(
            "expected {want} previous chi means, got {}",
            e_chi_prev.len()
        )));
    }
    let obs = characterization.augmented_observation(y, e_chi_prev);
    let pred = characterization.augmented_prediction(y, forward_j);
    Ok(obs.iter().zip(&pred).map(|(o, p)| o - p).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anneal_examples() {
        let a2 = anneal_step(2.0, 1);
        assert!((a2 - 2.0 / std::f64::consts::E).abs() < 1e-15);
        assert!((a2 - 0.7358).abs() < 1e-4);
        let a4 = anneal_step(anneal_step(a2, 2), 3);
        assert!((a4 - 2.0 * (-6.0f64).exp()).abs() <= 1e-12 * a4);
        assert_eq!(anneal_step(0.0, 4), 0.0);
    }

    #[test]
    fn rejection_examples() {
        let cand = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
        let pred = DMatrix::from_row_slice(1, 3, &[-1.0, -2.0, -3.0]);
        let r = rejection_filter(&[5.0; 3], &[4.0, 6.0, 5.0], &cand, &pred);
        assert_eq!(r.flags, vec![true, false, false]);
        assert_eq!(r.accepted.as_slice(), &[1.0, -2.0, -3.0]);
        assert_eq!(r.chi, vec![4.0, 5.0, 5.0]);
        let all = rejection_filter(&[5.0; 3], &[1.0; 3], &cand, &pred);
        assert_eq!(all.accepted, cand);
        let none = rejection_filter(&[5.0; 3], &[9.0; 3], &cand, &pred);
        assert_eq!(none.accepted, pred);
        assert_eq!(none.n_accepted(), 0);
    }

    #[test]
    fn error_vector_examples() {
        let y = [1.0, -2.0];
        let h = [0.0, 0.0];
        assert_eq!(build_error_vector(Characterization::Plain, &y, &y, &[]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(
            build_error_vector(Characterization::AugmentedSum, &y, &h, &[5.0]).unwrap(),
            vec![0.0, 1.0, -2.0]
        );
        assert_eq!(
            build_error_vector(Characterization::AugmentedComponentwise, &y, &h, &[0.5, 3.0]).unwrap(),
            vec![1.0 - 0.5, 4.0 - 3.0, 1.0, -2.0]
        );
        assert!(build_error_vector(Characterization::AugmentedSum, &y, &h, &[]).is_err());
        assert!(Characterization::parse("bogus").is_err());
    }
}
