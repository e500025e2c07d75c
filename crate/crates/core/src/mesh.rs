//! Triangulated disk meshes with an insonified sub-region.
//!
//! The mesher places nodes on concentric rings around the origin. Ring
//! spacing follows a radial size function that is fine inside the
//! insonified region (IR), grows linearly outward and blends into the
//! boundary spacing near the rim. The point cloud is then Delaunay
//! triangulated.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use sha1::{Digest, Sha1};

use crate::error::{Error, Result};

/// Distance tolerance for boundary nodes (cm).
pub const BOUNDARY_TOL: f64 = 1e-9;

/// 2D cross-section of the insonified region: a disk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrSpec {
    pub center: [f64; 2],
    pub radius: f64,
}

impl IrSpec {
    pub fn contains(&self, x: [f64; 2]) -> bool {
        let dx = x[0] - self.center[0];
        let dy = x[1] - self.center[1];
        (dx * dx + dy * dy).sqrt() <= self.radius + 1e-12
    }
}

/// Full mesher input. `ir_h_ratio = 1` and `grading = 0` give a quasi-uniform mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshSpec {
    pub radius: f64,
    /// Element size away from the IR (cm).
    pub target_h: f64,
    pub ir: IrSpec,
    /// IR element size as a fraction of `target_h`.
    pub ir_h_ratio: f64,
    /// Growth rate of the element size away from the refined zone (cm per cm).
    pub grading: f64,
    /// Number of boundary nodes; derived from `target_h` when absent.
    pub boundary_divisions: Option<usize>,
    /// Ring node counts are multiples of this, so the mesh has that rotational symmetry.
    pub symmetry: usize,
}

impl MeshSpec {
    pub fn uniform(radius: f64, target_h: f64, ir: IrSpec) -> Self {
        MeshSpec {
            radius,
            target_h,
            ir,
            ir_h_ratio: 1.0,
            grading: 0.0,
            boundary_divisions: None,
            symmetry: 1,
        }
    }

    /// Same geometry with every length scale divided by `factor`.
    pub fn refined(&self, factor: f64) -> Self {
        MeshSpec {
            target_h: self.target_h / factor,
            boundary_divisions: self
                .boundary_divisions
                .map(|n| (n as f64 * factor).round() as usize),
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) {
            return Err(Error::Mesh(format!("radius must be positive, got {}", self.radius)));
        }
        if !(self.target_h > 0.0 && self.target_h < self.radius) {
            return Err(Error::Mesh(format!(
                "target_h must lie in (0, radius), got {}",
                self.target_h
            )));
        }
        if !(self.ir_h_ratio > 0.0 && self.ir_h_ratio <= 1.0) {
            return Err(Error::Mesh(format!(
                "ir_h_ratio must lie in (0, 1], got {}",
                self.ir_h_ratio
            )));
        }
        if !(self.grading >= 0.0) {
            return Err(Error::Mesh("grading must be nonnegative".into()));
        }
        if !(self.ir.radius > 0.0) {
            return Err(Error::Mesh("IR radius must be positive".into()));
        }
        let c = self.ir.center;
        if (c[0] * c[0] + c[1] * c[1]).sqrt() + self.ir.radius > self.radius {
            return Err(Error::Mesh("IR disk extends outside the domain".into()));
        }
        if let Some(n) = self.boundary_divisions {
            if n < 6 {
                return Err(Error::Mesh("need at least 6 boundary divisions".into()));
            }
        }
        if self.symmetry == 0 {
            return Err(Error::Mesh("symmetry order must be positive".into()));
        }
        Ok(())
    }

    fn boundary_count(&self) -> usize {
        self.boundary_divisions
            .unwrap_or_else(|| ((2.0 * PI * self.radius / self.target_h).round() as usize).max(6))
    }

    /// Radial size function h(r).
    fn size_at(&self, r: f64) -> f64 {
        let h_far = self.target_h;
        let h_ir = self.target_h * self.ir_h_ratio;
        let c = self.ir.center;
        let r_fine = (c[0] * c[0] + c[1] * c[1]).sqrt() + self.ir.radius + 2.0 * h_ir;
        let interior = if r <= r_fine {
            h_ir
        } else {
            (h_ir + self.grading * (r - r_fine)).min(h_far)
        };
        if self.grading > 0.0 || self.boundary_divisions.is_some() {
            let h_b = 2.0 * PI * self.radius / self.boundary_count() as f64;
            let g = if self.grading > 0.0 { self.grading } else { 1.0 };
            interior.min(h_b + g * (self.radius - r).max(0.0))
        } else {
            interior
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub nodes: Vec<[f64; 2]>,
    /// Counter-clockwise node index triples.
    pub triangles: Vec<[usize; 3]>,
    /// Boundary nodes ordered by polar angle.
    pub boundary: Vec<usize>,
    /// Boundary edges (each belongs to exactly one triangle).
    pub boundary_edges: Vec<[usize; 2]>,
    pub ir_flags: Vec<bool>,
    /// Characteristic element size (cm).
    pub h: f64,
    pub radius: f64,
}

/// Quasi-uniform disk mesh.
pub fn build_disk_mesh(radius: f64, target_h: f64, ir_spec: IrSpec) -> Result<Mesh> {
    build_mesh(&MeshSpec::uniform(radius, target_h, ir_spec))
}

pub fn build_mesh(spec: &MeshSpec) -> Result<Mesh> {
    spec.validate()?;
    let r_out = spec.radius;

    // ring radii from the centre outward, then stretched to land on the rim
    // a centred IR gets a ring exactly on its rim
    let c = spec.ir.center;
    let anchor = if c[0].hypot(c[1]) < 1e-12 { spec.ir.radius } else { 0.0 };
    let step = |r: f64| 0.5 * 3f64.sqrt() * spec.size_at(r);
    let mut radii = Vec::new();
    let mut r = spec.size_at(0.0);
    if anchor > 0.0 {
        let m = ((anchor / step(0.0)).round() as usize).max(1);
        radii.extend((1..=m).map(|j| anchor * j as f64 / m as f64));
        r = anchor + step(anchor);
    }
    while r < r_out - 0.5 * spec.size_at(r) {
        radii.push(r);
        r += step(r);
    }
    let last = radii.last().copied().unwrap_or(0.0);
    let gap = r_out - last;
    if last > anchor && gap > 0.0 {
        // stretch the rings outside the anchor so the final gap matches the local size
        let scale = (r_out - step(r_out).min(gap) - anchor) / (last - anchor);
        for r in radii.iter_mut().filter(|r| **r > anchor) {
            *r = anchor + (*r - anchor) * scale;
        }
    }

    let nb = spec.boundary_count();
    let mut nodes: Vec<[f64; 2]> = vec![[0.0, 0.0]];
    for (i, &r) in radii.iter().enumerate() {
        let sym = spec.symmetry;
        let mut n = (((2.0 * PI * r / spec.size_at(r)) / sym as f64).round() as usize * sym).max(6.max(sym));
        // rings near the rim copy the boundary count so every boundary node sees the same layer
        if 4 * n >= 3 * nb {
            n = nb;
        }
        let offset = if i % 2 == 1 { 0.5 } else { 0.0 };
        for j in 0..n {
            let t = 2.0 * PI * (j as f64 + offset) / n as f64;
            nodes.push([r * t.cos(), r * t.sin()]);
        }
    }
    let first_boundary = nodes.len();
    for j in 0..nb {
        let t = 2.0 * PI * j as f64 / nb as f64;
        nodes.push([r_out * t.cos(), r_out * t.sin()]);
    }

    let points: Vec<delaunator::Point> = nodes
        .iter()
        .map(|p| delaunator::Point { x: p[0], y: p[1] })
        .collect();
    let tri = delaunator::triangulate(&points);
    if tri.triangles.is_empty() {
        return Err(Error::Mesh("triangulation produced no elements".into()));
    }
    let mut triangles = Vec::with_capacity(tri.triangles.len() / 3);
    for t in tri.triangles.chunks_exact(3) {
        let mut e = [t[0], t[1], t[2]];
        if signed_area(&nodes, e) < 0.0 {
            e.swap(1, 2);
        }
        triangles.push(e);
    }

    let boundary: Vec<usize> = (first_boundary..nodes.len()).collect();
    let ir_flags = nodes.iter().map(|&x| spec.ir.contains(x)).collect();
    let mesh = Mesh {
        boundary_edges: boundary_edges(&triangles),
        nodes,
        triangles,
        boundary,
        ir_flags,
        h: spec.target_h,
        radius: r_out,
    };
    mesh.check(spec.ir)?;
    Ok(mesh)
}

fn signed_area(nodes: &[[f64; 2]], t: [usize; 3]) -> f64 {
    let [a, b, c] = t.map(|i| nodes[i]);
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

fn boundary_edges(triangles: &[[usize; 3]]) -> Vec<[usize; 2]> {
    let mut count: HashMap<(usize, usize), (usize, [usize; 2])> = HashMap::new();
    for t in triangles {
        for k in 0..3 {
            let (a, b) = (t[k], t[(k + 1) % 3]);
            let key = (a.min(b), a.max(b));
            count.entry(key).or_insert((0, [a, b])).0 += 1;
        }
    }
    let mut edges: Vec<[usize; 2]> = count
        .into_values()
        .filter(|(n, _)| *n == 1)
        .map(|(_, e)| e)
        .collect();
    edges.sort_unstable();
    edges
}

impl Mesh {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn area(&self, t: usize) -> f64 {
        signed_area(&self.nodes, self.triangles[t])
    }

    /// Global indices of IR nodes, ascending.
    pub fn ir_nodes(&self) -> Vec<usize> {
        (0..self.n_nodes()).filter(|&i| self.ir_flags[i]).collect()
    }

    pub fn max_edge_length(&self) -> f64 {
        let mut h: f64 = 0.0;
        for t in &self.triangles {
            for k in 0..3 {
                let a = self.nodes[t[k]];
                let b = self.nodes[t[(k + 1) % 3]];
                h = h.max(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
            }
        }
        h
    }

    /// Verifies element orientation, boundary placement and IR flags.
    pub fn check(&self, ir: IrSpec) -> Result<()> {
        let h2 = self.h * self.h;
        for (i, _) in self.triangles.iter().enumerate() {
            let a = self.area(i);
            if !(a > 1e-12 * h2) {
                return Err(Error::Mesh(format!("element {i} has nonpositive area {a:e}")));
            }
        }
        for &b in &self.boundary {
            let [x, y] = self.nodes[b];
            let d = ((x * x + y * y).sqrt() - self.radius).abs();
            if d > BOUNDARY_TOL {
                return Err(Error::Mesh(format!("boundary node {b} is {d:e} cm off the circle")));
            }
        }
        for (i, &f) in self.ir_flags.iter().enumerate() {
            if f != ir.contains(self.nodes[i]) {
                return Err(Error::Mesh(format!("IR flag of node {i} is inconsistent")));
            }
        }
        Ok(())
    }

    /// Nearest boundary node to the rim point at `angle` (radians), with its distance.
    pub fn nearest_boundary_node(&self, angle: f64) -> (usize, f64) {
        let target = [self.radius * angle.cos(), self.radius * angle.sin()];
        self.boundary
            .iter()
            .map(|&b| {
                let [x, y] = self.nodes[b];
                (b, ((x - target[0]).powi(2) + (y - target[1]).powi(2)).sqrt())
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("mesh has boundary nodes")
    }

    /// Locates the element containing `x` and returns its barycentric weights.
    pub fn locate(&self, x: [f64; 2]) -> Option<(usize, [f64; 3])> {
        for (t, tri) in self.triangles.iter().enumerate() {
            let [a, b, c] = tri.map(|i| self.nodes[i]);
            let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
            let l1 = ((b[0] - x[0]) * (c[1] - x[1]) - (c[0] - x[0]) * (b[1] - x[1])) / det;
            let l2 = ((c[0] - x[0]) * (a[1] - x[1]) - (a[0] - x[0]) * (c[1] - x[1])) / det;
            let l3 = 1.0 - l1 - l2;
            if l1 >= -1e-12 && l2 >= -1e-12 && l3 >= -1e-12 {
                return Some((t, [l1, l2, l3]));
            }
        }
        None
    }

    /// Interpolates a nodal field at `x`; `None` outside the mesh.
    pub fn interpolate(&self, field: &[f64], x: [f64; 2]) -> Option<f64> {
        let (t, w) = self.locate(x)?;
        let tri = self.triangles[t];
        Some((0..3).map(|k| w[k] * field[tri[k]]).sum())
    }

    /// Plain-text node/element format: `n_nodes n_triangles`, then
    /// `x y ir_flag` per node, then `i j k` per triangle (0-based).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} {}", self.n_nodes(), self.n_triangles());
        for (x, &f) in self.nodes.iter().zip(&self.ir_flags) {
            let _ = writeln!(s, "{:e} {:e} {}", x[0], x[1], u8::from(f));
        }
        for t in &self.triangles {
            let _ = writeln!(s, "{} {} {}", t[0], t[1], t[2]);
        }
        s
    }

    /// Parses the text format. The radius is taken from the outermost node
    /// and boundary nodes are recovered from the edge topology.
    pub fn from_text(text: &str) -> Result<Mesh> {
        let bad = |m: String| Error::Mesh(format!("mesh text: {m}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty input".into()))?;
        let counts: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|e| bad(format!("header: {e}"))))
            .collect::<Result<_>>()?;
        if counts.len() != 2 {
            return Err(bad("header must hold two counts".into()));
        }
        let (nn, nt) = (counts[0], counts[1]);
        let mut nodes = Vec::with_capacity(nn);
        let mut ir_flags = Vec::with_capacity(nn);
        for i in 0..nn {
            let line = lines.next().ok_or_else(|| bad(format!("missing node {i}")))?;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(bad(format!("node {i}: expected `x y ir_flag`")));
            }
            let x: f64 = f[0].parse().map_err(|e| bad(format!("node {i}: {e}")))?;
            let y: f64 = f[1].parse().map_err(|e| bad(format!("node {i}: {e}")))?;
            nodes.push([x, y]);
            ir_flags.push(match f[2] {
                "0" => false,
                "1" => true,
                other => return Err(bad(format!("node {i}: bad ir flag {other}"))),
            });
        }
        let mut triangles = Vec::with_capacity(nt);
        for i in 0..nt {
            let line = lines.next().ok_or_else(|| bad(format!("missing triangle {i}")))?;
            let idx: Vec<usize> = line
                .split_whitespace()
                .map(|t| t.parse().map_err(|e| bad(format!("triangle {i}: {e}"))))
                .collect::<Result<_>>()?;
            if idx.len() != 3 || idx.iter().any(|&k| k >= nn) {
                return Err(bad(format!("triangle {i}: bad connectivity")));
            }
            triangles.push([idx[0], idx[1], idx[2]]);
        }
        let boundary_edges = boundary_edges(&triangles);
        let mut boundary: Vec<usize> = boundary_edges.iter().flat_map(|e| *e).collect();
        boundary.sort_unstable();
        boundary.dedup();
        let angle = |i: usize| {
            let a = nodes[i][1].atan2(nodes[i][0]);
            if a < 0.0 { a + 2.0 * PI } else { a }
        };
        boundary.sort_by(|&a, &b| angle(a).total_cmp(&angle(b)));
        let radius = nodes
            .iter()
            .map(|p| (p[0] * p[0] + p[1] * p[1]).sqrt())
            .fold(0.0, f64::max);
        let mut mesh = Mesh {
            nodes,
            triangles,
            boundary,
            boundary_edges,
            ir_flags,
            h: 0.0,
            radius,
        };
        mesh.h = mesh.max_edge_length();
        Ok(mesh)
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_text().as_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn read_text(path: &Path) -> Result<Mesh> {
        let mut text = String::new();
        for line in std::io::BufReader::new(std::fs::File::open(path)?).lines() {
            text.push_str(&line?);
            text.push('\n');
        }
        Mesh::from_text(&text).map_err(|e| Error::Parse {
            path: path.to_owned(),
            message: e.to_string(),
        })
    }

    /// SHA-1 of the text export, hex encoded.
    pub fn content_hash(&self) -> String {
        let digest = Sha1::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Smallest boundary division count `>= min_count` that places every angle
/// (degrees) exactly on a boundary node, if one exists below `limit`.
pub fn aligned_boundary_divisions(angles_deg: &[f64], min_count: usize, limit: usize) -> Option<usize> {
    (min_count.max(6)..=limit).find(|&n| {
        angles_deg.iter().all(|a| {
            let s = a.rem_euclid(360.0) * n as f64 / 360.0;
            (s - s.round()).abs() < 1e-9
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ir() -> IrSpec {
        IrSpec { center: [0.0, 0.0], radius: 0.1 }
    }

    #[test]
    fn desk_geometry_has_ir_nodes() {
        let m = build_disk_mesh(4.0, 0.4, ir()).unwrap();
        m.check(ir()).unwrap();
        assert!(m.ir_flags.iter().any(|&f| f));
    }

    #[test]
    fn coarse_unit_disk_boundary_on_circle() {
        let m = build_disk_mesh(1.0, 0.5, ir()).unwrap();
        for &b in &m.boundary {
            let [x, y] = m.nodes[b];
            assert!(((x * x + y * y).sqrt() - 1.0).abs() <= 1e-9);
        }
        assert_eq!(m.boundary.len(), m.boundary_edges.len());
    }

    #[test]
    fn refinement_roughly_quadruples_elements() {
        for h in [0.4, 0.2, 0.1] {
            let a = build_disk_mesh(2.0, h, ir()).unwrap();
            let b = build_disk_mesh(2.0, h / 2.0, ir()).unwrap();
            let ratio = b.n_triangles() as f64 / a.n_triangles() as f64;
            assert!((3.0..=5.0).contains(&ratio), "h={h}: ratio {ratio}");
        }
    }

    #[test]
    fn graded_mesh_refines_the_ir() {
        let spec = MeshSpec {
            radius: 4.0,
            target_h: 0.6,
            ir: ir(),
            ir_h_ratio: 0.04,
            grading: 0.3,
            boundary_divisions: Some(120),
            symmetry: 1,
        };
        let m = build_mesh(&spec).unwrap();
        assert_eq!(m.boundary.len(), 120);
        assert!(m.ir_nodes().len() > 30, "{} IR nodes", m.ir_nodes().len());
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(build_disk_mesh(0.0, 0.1, ir()).is_err());
        assert!(build_disk_mesh(1.0, 1.5, ir()).is_err());
        let far = IrSpec { center: [3.95, 0.0], radius: 0.1 };
        assert!(build_disk_mesh(4.0, 0.4, far).is_err());
    }

    #[test]
    fn text_round_trip_preserves_topology() {
        let m = build_disk_mesh(1.0, 0.3, ir()).unwrap();
        let back = Mesh::from_text(&m.to_text()).unwrap();
        assert_eq!(back.nodes, m.nodes);
        assert_eq!(back.triangles, m.triangles);
        assert_eq!(back.ir_flags, m.ir_flags);
        assert_eq!(back.boundary_edges, m.boundary_edges);
        let mut a = back.boundary.clone();
        let mut b = m.boundary.clone();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn malformed_text_is_an_error() {
        assert!(Mesh::from_text("").is_err());
        assert!(Mesh::from_text("2 1\n0 0 0\n").is_err());
        assert!(Mesh::from_text("3 1\n0 0 0\n1 0 0\n0 1 2\n0 1 2\n").is_err());
    }

    #[test]
    fn boundary_alignment_search() {
        let angles: Vec<f64> = (0..12).flat_map(|v| (0..21).map(move |d| v as f64 * 30.0 + d as f64 * 9.0)).collect();
        assert_eq!(aligned_boundary_divisions(&angles, 50, 1000), Some(120));
        assert_eq!(aligned_boundary_divisions(&[0.5], 6, 100), None);
    }

    #[test]
    fn interpolation_reproduces_linear_fields() {
        let m = build_disk_mesh(1.0, 0.25, ir()).unwrap();
        let f: Vec<f64> = m.nodes.iter().map(|p| 2.0 * p[0] - p[1] + 0.5).collect();
        let v = m.interpolate(&f, [0.3, -0.2]).unwrap();
        assert!((v - (0.6 + 0.2 + 0.5)).abs() < 1e-12);
        assert!(m.interpolate(&f, [2.0, 0.0]).is_none());
    }
}
