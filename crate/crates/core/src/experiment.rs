//! End-to-end pipeline: meshes, synthetic data and reconstructions.

use crate::config::Config;
use crate::error::{Error, Result};
use crate::fem::ParameterField;
use crate::forward::{ScaledUmot, UmotForward};
use crate::gn::{run_gn, GnResult};
use crate::measure::MeasurementSet;
use crate::mesh::{build_mesh, Mesh};
use crate::scenario::{check_inverse_crime, generate_data, GeneratedData};
use crate::stochastic::{run, Scheme, StochasticResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Method {
    Ksg,
    Lsg,
    Gn,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ksg => "ksg",
            Method::Lsg => "lsg",
            Method::Gn => "gn",
        }
    }
}

pub fn recon_mesh(cfg: &Config) -> Result<Mesh> {
    let m = build_mesh(&cfg.mesh_spec()?)?;
    m.check(cfg.ir())?;
    Ok(m)
}

pub fn data_mesh(cfg: &Config) -> Result<Mesh> {
    let m = build_mesh(&cfg.data_mesh_spec()?)?;
    m.check(cfg.ir())?;
    Ok(m)
}

/// Synthetic data for the configured phantom on the finer data mesh.
pub fn synthesize(cfg: &Config, noise_frac: f64, seed: u64) -> Result<GeneratedData> {
    let mesh = data_mesh(cfg)?;
    generate_data(&cfg.phantom(), &mesh, &cfg.optics, &cfg.ultrasound, &cfg.geometry, noise_frac, seed)
}

pub fn forward_model(cfg: &Config, mesh: Mesh) -> Result<UmotForward> {
    UmotForward::new(mesh, cfg.optics, cfg.ultrasound.clone(), &cfg.geometry)
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub method: Method,
    /// Physical field, clamped at zero.
    pub field: ParameterField,
    pub stochastic: Option<StochasticResult>,
    pub gn: Option<GnResult>,
}

/// Refuses data whose geometry or domain differ from the configuration.
pub fn check_data(cfg: &Config, data: &MeasurementSet, mesh: &Mesh) -> Result<()> {
    let want = cfg.geometry.descriptor();
    let mut diffs = Vec::new();
    if data.meta.geometry != want {
        diffs.push(format!("geometry: data `{}`, config `{}`", data.meta.geometry, want));
    }
    if (data.meta.radius - cfg.mesh.radius).abs() > 1e-12 * cfg.mesh.radius {
        diffs.push(format!("radius: data {}, config {}", data.meta.radius, cfg.mesh.radius));
    }
    if data.len() != cfg.geometry.n_measurements() {
        diffs.push(format!("rows: data {}, config {}", data.len(), cfg.geometry.n_measurements()));
    }
    if !diffs.is_empty() {
        return Err(Error::Config(format!("data do not match the configuration\n  {}", diffs.join("\n  "))));
    }
    check_inverse_crime(&data.meta.mesh_hash, mesh, cfg.mesh.allow_same_mesh)
}

/// Reconstructs from the background start; `rs` overrides the configured rejection flag.
pub fn reconstruct(
    cfg: &Config,
    forward: &UmotForward,
    data: &MeasurementSet,
    method: Method,
    rs: Option<bool>,
    seed: u64,
) -> Result<Reconstruction> {
    check_data(cfg, data, forward.mesh())?;
    let p_bg = cfg.phantom.background;
    let model = ScaledUmot { forward, p_scale: p_bg, mode: cfg.solver.forward_mode.into() };
    let p0 = vec![1.0; forward.n_params()];
    let (scaled, stochastic, gn) = match method {
        Method::Gn => {
            let r = run_gn(&model, &data.values, &p0, &cfg.solver.gn)?;
            (r.estimate.clone(), None, Some(r))
        }
        Method::Ksg | Method::Lsg => {
            let mut c = cfg.clone();
            c.solver.scheme = if method == Method::Ksg { Scheme::Ksg } else { Scheme::Lsg };
            if let Some(rs) = rs {
                c.solver.rejection_strategy = rs;
            }
            let r = run(&model, &data.values, &p0, &c.solver_config(seed))?;
            (r.estimate.clone(), Some(r), None)
        }
    };
    let values = scaled.iter().map(|v| (v * p_bg).max(0.0)).collect();
    let field = ParameterField::from_values(forward.mesh(), values)?;
    Ok(Reconstruction { method, field, stochastic, gn })
}
