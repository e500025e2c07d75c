//! Detector geometry, delay quadrature and measurement sets.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::UltrasoundConfig;
use crate::mesh::Mesh;

/// Rotating fan of boundary detectors with a source opposite the central one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorGeometry {
    pub n_detectors: usize,
    /// Angular span covered by the detectors of one view (degrees).
    pub span_deg: f64,
    pub n_views: usize,
    pub view_step_deg: f64,
    /// Angle of the central detector in view 0 (degrees).
    pub first_center_deg: f64,
    pub source_strength: f64,
    /// Largest allowed distance between a nominal detector position and its node (cm).
    pub tolerance: f64,
}

impl Default for DetectorGeometry {
    fn default() -> Self {
        DetectorGeometry {
            n_detectors: 21,
            span_deg: 180.0,
            n_views: 12,
            view_step_deg: 30.0,
            first_center_deg: 0.0,
            source_strength: 1.0,
            tolerance: 1e-6,
        }
    }
}

/// Node assignment for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub source: usize,
    pub detectors: Vec<usize>,
    pub angles_deg: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedGeometry {
    pub views: Vec<View>,
    pub source_strength: f64,
}

impl ResolvedGeometry {
    pub fn n_measurements(&self) -> usize {
        self.views.iter().map(|v| v.detectors.len()).sum()
    }

    /// Distinct detector nodes over all views, sorted.
    pub fn detector_nodes(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.views.iter().flat_map(|v| v.detectors.iter().copied()).collect();
        d.sort_unstable();
        d.dedup();
        d
    }
}

impl DetectorGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.n_detectors == 0 || self.n_views == 0 {
            return Err(Error::Config("detector and view counts must be positive".into()));
        }
        if !(self.span_deg > 0.0 && self.span_deg < 360.0) {
            return Err(Error::Config("detector span must lie in (0, 360)".into()));
        }
        if !(self.source_strength > 0.0) || !(self.tolerance > 0.0) {
            return Err(Error::Config("source strength and tolerance must be positive".into()));
        }
        Ok(())
    }

    pub fn n_measurements(&self) -> usize {
        self.n_detectors * self.n_views
    }

    pub fn center_deg(&self, view: usize) -> f64 {
        self.first_center_deg + view as f64 * self.view_step_deg
    }

    pub fn detector_angle_deg(&self, view: usize, det: usize) -> f64 {
        let c = self.center_deg(view);
        if self.n_detectors == 1 {
            return c;
        }
        c - 0.5 * self.span_deg + det as f64 * self.span_deg / (self.n_detectors - 1) as f64
    }

    pub fn source_angle_deg(&self, view: usize) -> f64 {
        self.center_deg(view) + 180.0
    }

    /// Every angle the geometry places on the boundary.
    pub fn all_angles_deg(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for v in 0..self.n_views {
            out.push(self.source_angle_deg(v));
            out.extend((0..self.n_detectors).map(|d| self.detector_angle_deg(v, d)));
        }
        out
    }

    pub fn resolve(&self, mesh: &Mesh) -> Result<ResolvedGeometry> {
        self.validate()?;
        let snap = |deg: f64, what: &str| -> Result<usize> {
            let (node, dist) = mesh.nearest_boundary_node(deg.to_radians());
            if dist > self.tolerance {
                return Err(Error::Geometry(format!(
                    "{what} at {deg} deg is {dist:.3e} cm from the nearest boundary node"
                )));
            }
            Ok(node)
        };
        let mut views = Vec::with_capacity(self.n_views);
        for v in 0..self.n_views {
            let source = snap(self.source_angle_deg(v), "source")?;
            let angles_deg: Vec<f64> = (0..self.n_detectors).map(|d| self.detector_angle_deg(v, d)).collect();
            let detectors = angles_deg
                .iter()
                .map(|&a| snap(a, "detector"))
                .collect::<Result<Vec<_>>>()?;
            let mut uniq = detectors.clone();
            uniq.sort_unstable();
            uniq.dedup();
            if uniq.len() != detectors.len() {
                return Err(Error::Geometry(format!("view {v}: detectors share boundary nodes")));
            }
            views.push(View { source, detectors, angles_deg });
        }
        Ok(ResolvedGeometry { views, source_strength: self.source_strength })
    }

    /// Compact text form used in data-file metadata.
    pub fn descriptor(&self) -> String {
        format!(
            "{}x{}deg,{}x{}deg,center{}deg",
            self.n_detectors, self.span_deg, self.n_views, self.view_step_deg, self.first_center_deg
        )
    }
}

/// Trapezoid weights over the delay samples with a zero left endpoint at 0.
pub fn trapezoid_weights(theta: &[f64]) -> Vec<f64> {
    let n = theta.len();
    (0..n)
        .map(|i| {
            let left = if i == 0 { 0.0 } else { theta[i - 1] };
            let right = if i + 1 < n { theta[i + 1] } else { theta[i] };
            0.5 * (right - left)
        })
        .collect()
}

/// Complex weights w_i exp(-j omega_a theta_i) of the truncated Fourier integral.
pub fn fourier_weights(us: &UltrasoundConfig) -> Vec<Complex<f64>> {
    trapezoid_weights(&us.theta_samples)
        .into_iter()
        .zip(&us.theta_samples)
        .map(|(w, &t)| Complex::from_polar(w, -us.omega_a * t))
        .collect()
}

/// One measured modulus with its geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub view: usize,
    pub detector: usize,
    pub angle_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    pub values: Vec<f64>,
    pub entries: Vec<Entry>,
    pub noise_frac: f64,
    pub meta: DataMeta,
}

/// Provenance written into measurement files.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DataMeta {
    pub radius: f64,
    pub geometry: String,
    pub seed: u64,
    pub mesh_hash: String,
}

impl MeasurementSet {
    pub fn from_values(values: Vec<f64>, geometry: &DetectorGeometry) -> Result<Self> {
        if values.len() != geometry.n_measurements() {
            return Err(Error::Dimension(format!(
                "{} values for {} measurements",
                values.len(),
                geometry.n_measurements()
            )));
        }
        let entries = (0..geometry.n_views)
            .flat_map(|v| {
                (0..geometry.n_detectors).map(move |d| Entry {
                    view: v,
                    detector: d,
                    angle_deg: geometry.detector_angle_deg(v, d),
                })
            })
            .collect();
        Ok(MeasurementSet {
            values,
            entries,
            noise_frac: 0.0,
            meta: DataMeta { geometry: geometry.descriptor(), ..Default::default() },
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut w = std::io::BufWriter::new(w);
        writeln!(w, "# radius = {}", self.meta.radius)?;
        writeln!(w, "# geometry = {}", self.meta.geometry)?;
        writeln!(w, "# noise_frac = {}", self.noise_frac)?;
        writeln!(w, "# seed = {}", self.meta.seed)?;
        writeln!(w, "# mesh_hash = {}", self.meta.mesh_hash)?;
        let mut cw = csv::Writer::from_writer(w);
        cw.write_record(["view", "detector", "angle_deg", "value"]).map_err(csv_io)?;
        for (e, v) in self.entries.iter().zip(&self.values) {
            cw.write_record([
                e.view.to_string(),
                e.detector.to_string(),
                e.angle_deg.to_string(),
                v.to_string(),
            ])
            .map_err(csv_io)?;
        }
        cw.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn read_csv_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_csv(&text).map_err(|message| Error::Parse { path: path.to_path_buf(), message })
    }

    pub fn parse_csv(text: &str) -> std::result::Result<Self, String> {
        let mut meta = DataMeta::default();
        let mut noise_frac = 0.0;
        for line in text.as_bytes().lines() {
            let line = line.map_err(|e| e.to_string())?;
            let Some(rest) = line.strip_prefix('#') else { continue };
            let Some((k, v)) = rest.split_once('=') else { continue };
            let v = v.trim();
            let num = |v: &str| v.parse::<f64>().map_err(|e| format!("{}: {e}", k.trim()));
            match k.trim() {
                "radius" => meta.radius = num(v)?,
                "geometry" => meta.geometry = v.to_string(),
                "noise_frac" => noise_frac = num(v)?,
                "seed" => meta.seed = v.parse().map_err(|e| format!("seed: {e}"))?,
                "mesh_hash" => meta.mesh_hash = v.to_string(),
                _ => {}
            }
        }
        let mut rd = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut values = Vec::new();
        let mut entries = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let rec = rec.map_err(|e| e.to_string())?;
            if rec.len() != 4 {
                return Err(format!("row {}: expected 4 fields, got {}", i + 1, rec.len()));
            }
            let field = |j: usize| rec.get(j).unwrap_or("");
            let bad = |j: usize| format!("row {}: bad field '{}'", i + 1, field(j));
            let value: f64 = field(3).parse().map_err(|_| bad(3))?;
            if !value.is_finite() {
                return Err(format!("row {}: non-finite value", i + 1));
            }
            entries.push(Entry {
                view: field(0).parse().map_err(|_| bad(0))?,
                detector: field(1).parse().map_err(|_| bad(1))?,
                angle_deg: field(2).parse().map_err(|_| bad(2))?,
            });
            values.push(value);
        }
        if values.is_empty() {
            return Err("no measurement rows".into());
        }
        Ok(MeasurementSet { values, entries, noise_frac, meta })
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_mesh, IrSpec, MeshSpec};

    #[test]
    fn trapezoid_with_zero_endpoint() {
        let w = trapezoid_weights(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(w, vec![1.0, 1.0, 1.0, 0.5]);
        // integrates linear functions vanishing at zero exactly
        let s: f64 = w.iter().zip([1.0, 2.0, 3.0, 4.0]).map(|(w, t)| w * 3.0 * t).sum();
        assert!((s - 24.0).abs() < 1e-12);
    }

    #[test]
    fn default_geometry_has_252_measurements() {
        let g = DetectorGeometry::default();
        assert_eq!(g.n_measurements(), 252);
        assert_eq!(g.detector_angle_deg(0, 10), 0.0);
        assert_eq!(g.detector_angle_deg(0, 0), -90.0);
        assert_eq!(g.source_angle_deg(0), 180.0);
    }

    #[test]
    fn resolves_on_aligned_mesh_and_rejects_misaligned() {
        let ir = IrSpec { center: [0.0, 0.0], radius: 0.3 };
        let mut spec = MeshSpec::uniform(4.0, 0.5, ir);
        spec.boundary_divisions = Some(120);
        let mesh = build_mesh(&spec).unwrap();
        let g = DetectorGeometry::default();
        let r = g.resolve(&mesh).unwrap();
        assert_eq!(r.n_measurements(), 252);
        assert_eq!(r.detector_nodes().len(), 120);
        spec.boundary_divisions = Some(50);
        let mesh = build_mesh(&spec).unwrap();
        assert!(matches!(g.resolve(&mesh), Err(Error::Geometry(_))));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let g = DetectorGeometry::default();
        let values: Vec<f64> = (0..252).map(|i| (i as f64 * 0.37).sin().abs() * 1e-17).collect();
        let mut m = MeasurementSet::from_values(values, &g).unwrap();
        m.noise_frac = 0.01;
        m.meta.radius = 4.0;
        m.meta.seed = 7;
        m.meta.mesh_hash = "abc".into();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let back = MeasurementSet::parse_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn malformed_csv_rejected() {
        assert!(MeasurementSet::parse_csv("view,detector,angle_deg,value\n0,0,x,1\n").is_err());
        assert!(MeasurementSet::parse_csv("view,detector,angle_deg,value\n").is_err());
    }
}
