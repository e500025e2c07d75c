//! Experiment configuration, read from TOML.
//!
//! ```toml
//! [mesh]
//! target_h = 0.6
//! [phantom]
//! kind = "central"
//! [solver]
//! scheme = "lsg"
//! rejection_strategy = true
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};

use crate::error::{Error, Result};
use crate::fem::{OpticalProps, UltrasoundConfig};
use crate::forward::ForwardMode;
use crate::gn::GnConfig;
use crate::measure::DetectorGeometry;
use crate::mesh::{aligned_boundary_divisions, IrSpec, MeshSpec};
use crate::scenario::{Inclusion, Phantom, PhantomKind, BACKGROUND_P};
use crate::stochastic::{Characterization, Scheme, SolverConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub mesh: MeshSection,
    pub optics: OpticalProps,
    pub ultrasound: UltrasoundConfig,
    pub phantom: PhantomSection,
    pub geometry: DetectorGeometry,
    pub solver: SolverSection,
    pub diagnostics: DiagnosticsSection,
}

/// Settings of the `diagnose` suites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsSection {
    pub stability_dtau: Vec<f64>,
    pub stability_epsilon: f64,
    pub stability_seeds: usize,
    pub stability_iterations: usize,
    pub mc_grid: Vec<usize>,
    pub mc_replicates: usize,
    pub tau_dtau: f64,
    pub tau_final: f64,
    pub tau_refinements: Vec<usize>,
    pub tau_seeds: usize,
    pub martingale_dtau: f64,
    pub martingale_tail: usize,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        DiagnosticsSection {
            stability_dtau: vec![1.0, 0.25, 0.0625],
            stability_epsilon: 0.01,
            stability_seeds: 5,
            stability_iterations: 20,
            mc_grid: vec![16, 64, 256, 1024],
            mc_replicates: 50,
            tau_dtau: 0.5,
            tau_final: 4.0,
            tau_refinements: vec![1, 4, 16, 64],
            tau_seeds: 10,
            martingale_dtau: 0.01,
            martingale_tail: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshSection {
    pub radius: f64,
    pub target_h: f64,
    pub ir_center: [f64; 2],
    pub ir_radius: f64,
    pub ir_h_ratio: f64,
    pub grading: f64,
    /// Boundary node count; the smallest count aligned with the detectors when absent.
    pub boundary_divisions: Option<usize>,
    /// Rotational symmetry order of the mesh; the view rotation order when absent.
    pub symmetry: Option<usize>,
    /// Length-scale ratio between the reconstruction and data meshes.
    pub data_refinement: f64,
    pub allow_same_mesh: bool,
}

impl Default for MeshSection {
    fn default() -> Self {
        MeshSection {
            radius: 4.0,
            target_h: 0.6,
            ir_center: [0.0, 0.0],
            ir_radius: 0.1,
            ir_h_ratio: 0.05,
            grading: 0.4,
            boundary_divisions: None,
            symmetry: None,
            data_refinement: 2.0,
            allow_same_mesh: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    pub kind: PhantomKind,
    pub background: f64,
    /// Radius of the central inclusion.
    pub central_radius: f64,
    /// Inclusions of a custom phantom.
    pub inclusions: Vec<Inclusion>,
    pub noise_frac: f64,
}

impl Default for PhantomSection {
    fn default() -> Self {
        PhantomSection {
            kind: PhantomKind::Side,
            background: BACKGROUND_P,
            central_radius: 0.05,
            inclusions: Vec::new(),
            noise_frac: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub scheme: Scheme,
    pub characterization: Characterization,
    pub n_e: usize,
    pub delta_tau: f64,
    pub sigma_b: f64,
    pub sigma_eta: f64,
    /// Defaults to 2 for KSG, and 3 (side) or 5 (central) for LSG.
    pub alpha_1: Option<f64>,
    pub rejection_strategy: bool,
    pub max_iters: usize,
    pub plateau_tol: f64,
    pub plateau_window: usize,
    pub init_spread: f64,
    pub forward_mode: ForwardModeTag,
    pub seed: u64,
    /// Pixels per side of the PGM raster.
    pub raster_size: usize,
    /// Cross-section end points (cm); the vertical IR diameter when absent.
    pub cross_section: Option<[[f64; 2]; 2]>,
    pub cross_section_samples: usize,
    pub gn: GnConfig,
}

impl Default for SolverSection {
    fn default() -> Self {
        let s = SolverConfig::default();
        SolverSection {
            scheme: s.scheme,
            characterization: s.characterization,
            n_e: s.n_e,
            delta_tau: s.delta_tau,
            sigma_b: s.sigma_b,
            sigma_eta: s.sigma_eta,
            alpha_1: None,
            rejection_strategy: false,
            max_iters: s.max_iters,
            plateau_tol: s.plateau_tol,
            plateau_window: s.plateau_window,
            init_spread: 0.1,
            forward_mode: ForwardModeTag::Linearized,
            seed: 0,
            raster_size: 64,
            cross_section: None,
            cross_section_samples: 101,
            gn: GnConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ForwardModeTag {
    #[default]
    Linearized,
    Nonlinear,
}

impl From<ForwardModeTag> for ForwardMode {
    fn from(t: ForwardModeTag) -> Self {
        match t {
            ForwardModeTag::Linearized => ForwardMode::Linearized,
            ForwardModeTag::Nonlinear => ForwardMode::Nonlinear,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Config = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.optics.validate()?;
        self.ultrasound.validate()?;
        self.geometry.validate()?;
        self.phantom().validate(&self.ir())?;
        if !(self.mesh.data_refinement >= 1.0) {
            return Err(Error::Config("data_refinement must be at least 1".into()));
        }
        if !(self.phantom.noise_frac >= 0.0) {
            return Err(Error::Config("noise_frac must be nonnegative".into()));
        }
        self.solver_config(self.solver.seed).validate()?;
        self.solver.gn.validate()?;
        Ok(())
    }

    pub fn ir(&self) -> IrSpec {
        IrSpec { center: self.mesh.ir_center, radius: self.mesh.ir_radius }
    }

    pub fn phantom(&self) -> Phantom {
        let mut p = match self.phantom.kind {
            PhantomKind::Side => Phantom::side(),
            PhantomKind::Central => Phantom::central(self.phantom.central_radius),
            PhantomKind::Custom => Phantom {
                kind: PhantomKind::Custom,
                background: self.phantom.background,
                inclusions: self.phantom.inclusions.clone(),
            },
        };
        p.background = self.phantom.background;
        p
    }

    /// Reconstruction mesh; the boundary count is aligned with the detector angles.
    pub fn mesh_spec(&self) -> Result<MeshSpec> {
        let m = &self.mesh;
        let divisions = match m.boundary_divisions {
            Some(n) => n,
            None => {
                let min = (2.0 * std::f64::consts::PI * m.radius / m.target_h).round() as usize;
                aligned_boundary_divisions(&self.geometry.all_angles_deg(), min, 7200).ok_or_else(|| {
                    Error::Geometry("no boundary division count places every detector on a node".into())
                })?
            }
        };
        let symmetry = m.symmetry.unwrap_or_else(|| {
            let g = &self.geometry;
            let turns = 360.0 / g.view_step_deg;
            let n = turns.round();
            if (turns - n).abs() < 1e-9 && n >= 1.0 && divisions % n as usize == 0 {
                n as usize
            } else {
                1
            }
        });
        Ok(MeshSpec {
            symmetry,
            radius: m.radius,
            target_h: m.target_h,
            ir: self.ir(),
            ir_h_ratio: m.ir_h_ratio,
            grading: m.grading,
            boundary_divisions: Some(divisions),
        })
    }

    pub fn data_mesh_spec(&self) -> Result<MeshSpec> {
        Ok(self.mesh_spec()?.refined(self.mesh.data_refinement))
    }

    pub fn alpha_1(&self) -> f64 {
        self.solver.alpha_1.unwrap_or(match (self.solver.scheme, self.phantom.kind) {
            (Scheme::Ksg, _) => 2.0,
            (Scheme::Lsg, PhantomKind::Central) => 5.0,
            (Scheme::Lsg, _) => 3.0,
        })
    }

    pub fn solver_config(&self, seed: u64) -> SolverConfig {
        let s = &self.solver;
        SolverConfig {
            scheme: s.scheme,
            characterization: s.characterization,
            n_e: s.n_e,
            delta_tau: s.delta_tau,
            sigma_b: s.sigma_b,
            sigma_eta: s.sigma_eta,
            alpha_1: self.alpha_1(),
            rejection_strategy: s.rejection_strategy,
            max_iters: s.max_iters,
            plateau_tol: s.plateau_tol,
            plateau_window: s.plateau_window,
            init_spread: s.init_spread,
            substeps: 1,
            seed,
        }
    }

    pub fn cross_section_line(&self) -> [[f64; 2]; 2] {
        self.solver.cross_section.unwrap_or_else(|| {
            let [cx, cy] = self.mesh.ir_center;
            let r = self.mesh.ir_radius;
            [[cx, cy - r], [cx, cy + r]]
        })
    }
}

/// Git blob hash of a byte string.
pub fn git_hash(bytes: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = Config::from_toml("").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.mesh_spec().unwrap().boundary_divisions, Some(120));
        assert_eq!(c.data_mesh_spec().unwrap().boundary_divisions, Some(240));
    }

    #[test]
    fn alpha_defaults_follow_scheme_and_phantom() {
        let mut c = Config::default();
        assert_eq!(c.alpha_1(), 2.0);
        c.solver.scheme = Scheme::Lsg;
        assert_eq!(c.alpha_1(), 3.0);
        c.phantom.kind = PhantomKind::Central;
        assert_eq!(c.alpha_1(), 5.0);
        c.solver.alpha_1 = Some(0.5);
        assert_eq!(c.alpha_1(), 0.5);
    }

    #[test]
    fn sections_parse_and_round_trip() {
        let text = r#"
[mesh]
target_h = 0.7
[optics]
mu_a = 0.2
[ultrasound]
theta_samples = [1e-7, 2e-7]
[phantom]
kind = "custom"
inclusions = [{ center = [0.0, 0.02], radius = 0.02, value = 4e-7 }]
[geometry]
n_views = 6
view_step_deg = 60.0
[solver]
scheme = "lsg"
characterization = "version2_augmented_sum"
rejection_strategy = true
[solver.gn]
max_iters = 7
"#;
        let c = Config::from_toml(text).unwrap();
        assert_eq!(c.mesh.target_h, 0.7);
        assert_eq!(c.optics.mu_a, 0.2);
        assert_eq!(c.phantom().inclusions.len(), 1);
        assert_eq!(c.solver.characterization, Characterization::AugmentedSum);
        assert_eq!(c.solver.gn.max_iters, 7);
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(Config::from_toml("[mesh]\ntarget_hh = 1.0\n").is_err());
        assert!(Config::from_toml("[solver]\nn_e = 1\n").is_err());
        assert!(Config::from_toml("[phantom]\nkind = \"custom\"\ninclusions = [{ center = [0.5, 0.0], radius = 0.1, value = 1e-7 }]\n").is_err());
    }

    #[test]
    fn git_hash_matches_git() {
        // `printf 'hello\n' | git hash-object --stdin`
        assert_eq!(git_hash(b"hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
    }
}
