//! Particle ensembles and their Brownian prediction step.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Parameter particles stored column-wise (n_p x n_E).
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub particles: DMatrix<f64>,
    pub k: usize,
    /// Per-particle objective from the last accepted state.
    pub chi: Vec<f64>,
}

impl Ensemble {
    pub fn new(particles: DMatrix<f64>) -> Result<Self> {
        if particles.ncols() == 0 || particles.nrows() == 0 {
            return Err(Error::Dimension("empty ensemble".into()));
        }
        if particles.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("ensemble has non-finite entries".into()));
        }
        let n = particles.ncols();
        Ok(Ensemble { particles, k: 0, chi: vec![f64::INFINITY; n] })
    }

    /// Every particle equal to `center`.
    pub fn constant(center: &[f64], n_e: usize) -> Result<Self> {
        Self::new(DMatrix::from_fn(center.len(), n_e, |i, _| center[i]))
    }

    pub fn n_params(&self) -> usize {
        self.particles.nrows()
    }

    pub fn n_members(&self) -> usize {
        self.particles.ncols()
    }

    pub fn particle(&self, j: usize) -> &[f64] {
        let n = self.n_params();
        &self.particles.as_slice()[j * n..(j + 1) * n]
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.n_members() as f64;
        self.particles.row_iter().map(|r| r.iter().sum::<f64>() / n).collect()
    }

    /// Mean over components of the per-component standard deviation.
    pub fn spread(&self) -> f64 {
        let n = self.n_members() as f64;
        let s: f64 = self
            .particles
            .row_iter()
            .map(|r| {
                let m = r.iter().sum::<f64>() / n;
                (r.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt()
            })
            .sum();
        s / self.n_params() as f64
    }
}

/// Independent Gaussian streams, one per index, each a ChaCha8 stream of
/// the run seed. Every increment over `dt` is the sum of `substeps`
/// standard normals per component, so a run with step `dt` and `substeps`
/// sees exactly the sums of the increments of a run with step
/// `dt / substeps` and one substep.
#[derive(Debug, Clone)]
pub struct BrownianStreams {
    rngs: Vec<ChaCha8Rng>,
    substeps: usize,
}

impl BrownianStreams {
    pub fn new(seed: u64, n_streams: usize, substeps: usize) -> Self {
        let rngs = (0..n_streams)
            .map(|j| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(j as u64);
                r
            })
            .collect();
        BrownianStreams { rngs, substeps: substeps.max(1) }
    }

    pub fn n_streams(&self) -> usize {
        self.rngs.len()
    }

    pub fn substeps(&self) -> usize {
        self.substeps
    }

    /// One standard normal per component, without substep summation.
    pub fn normals(&mut self, stream: usize, n: usize) -> Vec<f64> {
        let rng = &mut self.rngs[stream];
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    /// Brownian increment with variance `dt` per component.
    pub fn increment(&mut self, stream: usize, n: usize, dt: f64) -> Vec<f64> {
        let mut acc = vec![0.0; n];
        let rng = &mut self.rngs[stream];
        for _ in 0..self.substeps {
            for a in acc.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *a += z;
            }
        }
        let s = (dt / self.substeps as f64).sqrt();
        acc.iter_mut().for_each(|a| *a *= s);
        acc
    }
}

/// Stream carrying the pseudo-measurement noise; particle j uses stream j + 1.
pub const PSEUDO_STREAM: usize = 0;

/// p_{k+1}(j) = p^_k(j) + sigma_B dB_k(j).
pub fn predict(
    ensemble: &Ensemble,
    sigma_b: f64,
    delta_tau: f64,
    streams: &mut BrownianStreams,
) -> Ensemble {
    let mut out = ensemble.clone();
    let n = ensemble.n_params();
    if streams.n_streams() < ensemble.n_members() + 1 {
        panic!("need one Brownian stream per particle plus the pseudo-measurement stream");
    }
    for j in 0..ensemble.n_members() {
        let db = streams.increment(j + 1, n, delta_tau);
        let col = &mut out.particles.as_mut_slice()[j * n..(j + 1) * n];
        if sigma_b != 0.0 {
            for (p, d) in col.iter_mut().zip(&db) {
                *p += sigma_b * d;
            }
        }
    }
    out.k = ensemble.k + 1;
    out
}

/// Initial ensemble: center + spread * N(0, 1), drawn from the particle streams.
pub fn initial_ensemble(
    center: &[f64],
    spread: f64,
    n_e: usize,
    streams: &mut BrownianStreams,
) -> Result<Ensemble> {
    let n = center.len();
    let mut m = DMatrix::zeros(n, n_e);
    for j in 0..n_e {
        let z = streams.normals(j + 1, n);
        for i in 0..n {
            m[(i, j)] = center[i] + spread * z[i];
        }
    }
    Ensemble::new(m)
}
