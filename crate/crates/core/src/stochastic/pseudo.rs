//! Pseudo-measurement processes M_k = M + eta_k.

use super::ensemble::{BrownianStreams, PSEUDO_STREAM};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PseudoForm {
    /// Euler step M_{k+1} = M_k + drift dt + d_eta.
    Sde,
    /// M_{k+1} = M + eta_{k+1} with eta a random walk.
    Algebraic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoMeasurementState {
    pub data: Vec<f64>,
    pub current: Vec<f64>,
    pub eta: Vec<f64>,
    /// M_{k+1} - M_k of the last step.
    pub increment: Vec<f64>,
    pub k: usize,
}

impl PseudoMeasurementState {
    pub fn new(data: Vec<f64>) -> Self {
        let n = data.len();
        PseudoMeasurementState {
            current: data.clone(),
            data,
            eta: vec![0.0; n],
            increment: vec![0.0; n],
            k: 0,
        }
    }
}

pub fn evolve_pseudo_measurement(
    state: &PseudoMeasurementState,
    drift: &[f64],
    sigma_eta: f64,
    delta_tau: f64,
    form: PseudoForm,
    streams: &mut BrownianStreams,
) -> PseudoMeasurementState {
    let n = state.data.len();
    let d_eta: Vec<f64> = streams
        .increment(PSEUDO_STREAM, n, delta_tau)
        .into_iter()
        .map(|z| sigma_eta * z)
        .collect();
    let mut next = state.clone();
    next.k = state.k + 1;
    match form {
        PseudoForm::Sde => {
            for i in 0..n {
                next.increment[i] = drift[i] * delta_tau + d_eta[i];
                next.current[i] = state.current[i] + next.increment[i];
                next.eta[i] = state.eta[i] + d_eta[i];
            }
        }
        PseudoForm::Algebraic => {
            for i in 0..n {
                next.eta[i] = state.eta[i] + d_eta[i];
                next.current[i] = state.data[i] + next.eta[i];
                next.increment[i] = next.current[i] - state.current[i];
            }
        }
    }
    next
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn algebraic_without_noise_keeps_data() {
        let mut st = PseudoMeasurementState::new(vec![1.0, -2.0, 3.5]);
        let mut s = BrownianStreams::new(1, 1, 1);
        for _ in 0..5 {
            st = evolve_pseudo_measurement(&st, &[9.0; 3], 0.0, 1.0, PseudoForm::Algebraic, &mut s);
            assert_eq!(st.current, st.data);
        }
    }

    #[test]
    fn sde_without_noise_is_an_euler_step() {
        let st = PseudoMeasurementState::new(vec![1.0, 2.0]);
        let mut s = BrownianStreams::new(1, 1, 1);
        let next = evolve_pseudo_measurement(&st, &[0.5, -1.0], 0.0, 0.25, PseudoForm::Sde, &mut s);
        assert_eq!(next.current, vec![1.0 + 0.5 * 0.25, 2.0 - 0.25]);
    }

    #[test]
    fn algebraic_variance_grows_linearly() {
        let (sigma, dt, steps, reps) = (0.3, 0.5, 10, 10_000);
        let mut sums = vec![0.0; steps];
        for r in 0..reps {
            let mut st = PseudoMeasurementState::new(vec![0.0]);
            let mut s = BrownianStreams::new(r as u64, 1, 1);
            for v in sums.iter_mut() {
                st = evolve_pseudo_measurement(&st, &[0.0], sigma, dt, PseudoForm::Algebraic, &mut s);
                *v += st.current[0] * st.current[0];
            }
        }
        let var: Vec<f64> = sums.iter().map(|s| s / reps as f64).collect();
        let ks: Vec<f64> = (1..=steps).map(|k| k as f64).collect();
        let mk = ks.iter().sum::<f64>() / steps as f64;
        let mv = var.iter().sum::<f64>() / steps as f64;
        let slope = ks.iter().zip(&var).map(|(k, v)| (k - mk) * (v - mv)).sum::<f64>()
            / ks.iter().map(|k| (k - mk).powi(2)).sum::<f64>();
        let want = sigma * sigma * dt;
        assert!((slope - want).abs() <= 0.2 * want, "slope {slope} vs {want}");
    }
}
