//! Result files: fields, histories, rasters, cross-sections and manifests.
//! Every file is written to a temporary sibling and renamed into place.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::Result;
use crate::fem::ParameterField;
use crate::gn::GnRecord;
use crate::mesh::{IrSpec, Mesh};
use crate::stochastic::IterationRecord;

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// `node_index,p_value_cm2` for every IR node (global mesh indices).
pub fn field_csv(field: &ParameterField) -> String {
    let mut s = String::from("node_index,p_value_cm2\n");
    for (g, v) in field.ir_nodes.iter().zip(&field.values) {
        let _ = writeln!(s, "{g},{v:e}");
    }
    s
}

pub fn history_csv(history: &[IterationRecord]) -> String {
    let mut s = String::from("k,chi_mean,chi_min,alpha,accept_frac,ensemble_spread\n");
    for r in history {
        let _ = writeln!(
            s,
            "{},{:e},{:e},{:e},{},{:e}",
            r.k, r.chi_mean, r.chi_min, r.alpha, r.accept_frac, r.spread
        );
    }
    s
}

/// Gauss-Newton log; the first row (k = 0) holds the starting objective.
pub fn gn_log_csv(chi0: f64, history: &[GnRecord]) -> String {
    let mut s = String::from("k,chi,beta,decreased\n");
    let _ = writeln!(s, "0,{chi0:e},,");
    for r in history {
        let _ = writeln!(s, "{},{:e},{:e},{}", r.k, r.chi, r.beta, r.decreased as u8);
    }
    s
}

pub fn cross_section_csv(samples: &[(f64, f64)]) -> String {
    let mut s = String::from("arclength_cm,p_value\n");
    for (a, v) in samples {
        let _ = writeln!(s, "{a},{v:e}");
    }
    s
}

/// Binary 8-bit PGM of a nodal field over the IR bounding box, scaled so the
/// field maximum is white; pixels outside the IR are black.
pub fn raster_pgm(mesh: &Mesh, nodal: &[f64], ir: IrSpec, size: usize) -> Vec<u8> {
    let size = size.max(1);
    let vmax = nodal.iter().copied().fold(0.0, f64::max);
    let mut out = format!("P5\n{size} {size}\n255\n").into_bytes();
    let lo = [ir.center[0] - ir.radius, ir.center[1] - ir.radius];
    let step = 2.0 * ir.radius / size as f64;
    for row in 0..size {
        for col in 0..size {
            // pixel centres, top row at the largest y
            let x = [lo[0] + (col as f64 + 0.5) * step, lo[1] + (size - row) as f64 * step - 0.5 * step];
            let v = if ir.contains(x) { mesh.interpolate(nodal, x).unwrap_or(0.0) } else { 0.0 };
            let g = if vmax > 0.0 { (255.0 * (v / vmax).clamp(0.0, 1.0)).round() as u8 } else { 0 };
            out.push(g);
        }
    }
    out
}

/// Provenance record written before any heavy computation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub config_hash: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub version: String,
}

impl Manifest {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("manifest.toml"), self.to_toml().as_bytes())
    }
}
