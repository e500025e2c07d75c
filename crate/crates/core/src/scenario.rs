//! Phantoms and synthetic data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{OpticalProps, ParameterField, UltrasoundConfig};
use crate::forward::UmotForward;
use crate::measure::{DetectorGeometry, MeasurementSet};
use crate::mesh::{IrSpec, Mesh};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    #[default]
    Side,
    Central,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inclusion {
    pub center: [f64; 2],
    pub radius: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub kind: PhantomKind,
    pub background: f64,
    pub inclusions: Vec<Inclusion>,
}

pub const BACKGROUND_P: f64 = 1e-7;

impl Phantom {
    /// Two inclusions on the vertical IR axis, the lower one stronger.
    pub fn side() -> Self {
        Phantom {
            kind: PhantomKind::Side,
            background: BACKGROUND_P,
            inclusions: vec![
                Inclusion { center: [0.0, 0.06], radius: 0.03, value: 2e-7 },
                Inclusion { center: [0.0, -0.06], radius: 0.03, value: 3e-7 },
            ],
        }
    }

    pub fn central(radius: f64) -> Self {
        Phantom {
            kind: PhantomKind::Central,
            background: BACKGROUND_P,
            inclusions: vec![Inclusion { center: [0.0, 0.0], radius, value: 3e-7 }],
        }
    }

    pub fn validate(&self, ir: &IrSpec) -> Result<()> {
        if !(self.background >= 0.0 && self.background.is_finite()) {
            return Err(Error::Config("phantom background must be nonnegative".into()));
        }
        for (i, inc) in self.inclusions.iter().enumerate() {
            if !(inc.value >= 0.0 && inc.value.is_finite()) || !(inc.radius > 0.0) {
                return Err(Error::Config(format!("inclusion {i}: bad value or radius")));
            }
            let d = ((inc.center[0] - ir.center[0]).powi(2) + (inc.center[1] - ir.center[1]).powi(2)).sqrt();
            if d + inc.radius > ir.radius + 1e-12 {
                return Err(Error::Config(format!("inclusion {i} extends outside the IR")));
            }
        }
        Ok(())
    }

    /// Value at a point inside the IR; the first containing inclusion wins.
    pub fn value_at(&self, x: [f64; 2]) -> f64 {
        self.inclusions
            .iter()
            .find(|inc| {
                (x[0] - inc.center[0]).powi(2) + (x[1] - inc.center[1]).powi(2) <= inc.radius * inc.radius
            })
            .map_or(self.background, |inc| inc.value)
    }

    /// Peak value over the inclusions divided by the background.
    pub fn contrast_ratio(&self) -> f64 {
        let peak = self.inclusions.iter().map(|i| i.value).fold(self.background, f64::max);
        peak / self.background
    }
}

pub fn rasterize_phantom(phantom: &Phantom, mesh: &Mesh) -> ParameterField {
    let mut p = ParameterField::zeros(mesh);
    for (v, &g) in p.values.iter_mut().zip(&p.ir_nodes) {
        *v = phantom.value_at(mesh.nodes[g]);
    }
    p
}

#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub set: MeasurementSet,
    pub clean: Vec<f64>,
    /// True when every clean measurement is zero.
    pub all_zero: bool,
}

/// Nonlinear-mode measurements with multiplicative noise
/// M_i = clean_i (1 + noise_frac xi_i).
pub fn generate_data(
    phantom: &Phantom,
    fine_mesh: &Mesh,
    props: &OpticalProps,
    us: &UltrasoundConfig,
    geometry: &DetectorGeometry,
    noise_frac: f64,
    seed: u64,
) -> Result<GeneratedData> {
    if !(noise_frac >= 0.0 && noise_frac.is_finite()) {
        return Err(Error::Config("noise fraction must be nonnegative".into()));
    }
    let p = rasterize_phantom(phantom, fine_mesh);
    let fwd = UmotForward::new(fine_mesh.clone(), *props, us.clone(), geometry)?;
    let clean = fwd.evaluate_direct(&p.values, false)?;
    let values = add_noise(&clean, noise_frac, seed);
    let all_zero = clean.iter().all(|&v| v == 0.0);
    let mut set = MeasurementSet::from_values(values, geometry)?;
    set.noise_frac = noise_frac;
    set.meta.radius = fine_mesh.radius;
    set.meta.seed = seed;
    set.meta.mesh_hash = fine_mesh.content_hash();
    Ok(GeneratedData { set, clean, all_zero })
}

pub fn add_noise(clean: &[f64], noise_frac: f64, seed: u64) -> Vec<f64> {
    if noise_frac == 0.0 {
        return clean.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    clean
        .iter()
        .map(|&c| {
            let xi: f64 = StandardNormal.sample(&mut rng);
            c * (1.0 + noise_frac * xi)
        })
        .collect()
}

/// Refuses to invert data generated on the reconstruction mesh itself.
pub fn check_inverse_crime(data_mesh_hash: &str, recon_mesh: &Mesh, allow_same_mesh: bool) -> Result<()> {
    if !allow_same_mesh && data_mesh_hash == recon_mesh.content_hash() {
        return Err(Error::Config(
            "data were generated on the reconstruction mesh; set allow_same_mesh to override".into(),
        ));
    }
    Ok(())
}
