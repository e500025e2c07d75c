//! Forward maps from parameters to measurements.
//!
//! [`UmotForward`] caches the background factorizations and fields for one
//! mesh and detector geometry. Its linearized measurements are available
//! both by direct perturbation solves and through a precomputed complex
//! sensitivity matrix C built from adjoint fields, with F(p) = |C p|.

use std::sync::OnceLock;

use nalgebra::{Complex, DMatrix};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fem::{
    operator_values, perturbation_from_background, Factorization, FemOperators, OpticalProps,
    UltrasoundConfig,
};
use crate::measure::{fourier_weights, DetectorGeometry, MeasurementSet, ResolvedGeometry};
use crate::mesh::Mesh;

/// Anything the solvers can invert.
pub trait ForwardOperator: Sync {
    fn n_params(&self) -> usize;
    fn n_measurements(&self) -> usize;
    fn evaluate(&self, p: &[f64]) -> Result<Vec<f64>>;
}

/// M(p) = p in one dimension.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScalarIdentity;

impl ForwardOperator for ScalarIdentity {
    fn n_params(&self) -> usize {
        1
    }
    fn n_measurements(&self) -> usize {
        1
    }
    fn evaluate(&self, p: &[f64]) -> Result<Vec<f64>> {
        check_len(p, 1)?;
        Ok(p.to_vec())
    }
}

/// M(p) = A p.
#[derive(Debug, Clone)]
pub struct LinearOperator {
    pub a: DMatrix<f64>,
}

impl ForwardOperator for LinearOperator {
    fn n_params(&self) -> usize {
        self.a.ncols()
    }
    fn n_measurements(&self) -> usize {
        self.a.nrows()
    }
    fn evaluate(&self, p: &[f64]) -> Result<Vec<f64>> {
        check_len(p, self.a.ncols())?;
        let x = nalgebra::DVector::from_column_slice(p);
        Ok((&self.a * x).as_slice().to_vec())
    }
}

fn check_len(p: &[f64], n: usize) -> Result<()> {
    if p.len() != n {
        return Err(Error::Dimension(format!("expected {n} parameters, got {}", p.len())));
    }
    Ok(())
}

struct DelayData {
    a: f64,
    weight: Complex<f64>,
    k0: Factorization,
    /// Background field per view.
    background: Vec<Vec<f64>>,
}

/// Cached UMOT forward model on one mesh.
pub struct UmotForward {
    mesh: Mesh,
    ops: FemOperators,
    props: OpticalProps,
    us: UltrasoundConfig,
    geometry: ResolvedGeometry,
    delays: Vec<DelayData>,
    ir_nodes: Vec<usize>,
    sensitivity: OnceLock<Sensitivity>,
}

impl std::fmt::Debug for UmotForward {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UmotForward")
            .field("n_nodes", &self.mesh.n_nodes())
            .field("n_params", &self.ir_nodes.len())
            .field("n_measurements", &self.geometry.n_measurements())
            .finish()
    }
}

/// Complex linear map from IR nodal p (physical units) to the Fourier sums.
#[derive(Debug, Clone)]
pub struct Sensitivity {
    pub re: DMatrix<f64>,
    pub im: DMatrix<f64>,
}

impl Sensitivity {
    pub fn apply(&self, p: &[f64]) -> Vec<f64> {
        let x = nalgebra::DVector::from_column_slice(p);
        let re = &self.re * &x;
        let im = &self.im * &x;
        re.iter().zip(im.iter()).map(|(r, i)| r.hypot(*i)).collect()
    }
}

impl UmotForward {
    pub fn new(
        mesh: Mesh,
        props: OpticalProps,
        us: UltrasoundConfig,
        detectors: &DetectorGeometry,
    ) -> Result<Self> {
        props.validate()?;
        us.validate()?;
        let geometry = detectors.resolve(&mesh)?;
        let ops = FemOperators::build(&mesh);
        let n = mesh.n_nodes();
        let zero = vec![0.0; n];
        let weights = fourier_weights(&us);
        let delays = us
            .theta_samples
            .par_iter()
            .zip(weights.par_iter())
            .map(|(&theta, &weight)| -> Result<DelayData> {
                let k0 = Factorization::new(
                    &ops.pattern,
                    operator_values(&ops, &props, &us, &zero, theta),
                )?;
                let background = geometry
                    .views
                    .iter()
                    .map(|v| {
                        let mut q = vec![0.0; n];
                        q[v.source] = geometry.source_strength;
                        k0.solve(&q)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(DelayData { a: us.a_theta(theta), weight, k0, background })
            })
            .collect::<Result<Vec<_>>>()?;
        let ir_nodes = mesh.ir_nodes();
        Ok(UmotForward {
            mesh,
            ops,
            props,
            us,
            geometry,
            delays,
            ir_nodes,
            sensitivity: OnceLock::new(),
        })
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn geometry(&self) -> &ResolvedGeometry {
        &self.geometry
    }

    pub fn n_params(&self) -> usize {
        self.ir_nodes.len()
    }

    pub fn n_measurements(&self) -> usize {
        self.geometry.n_measurements()
    }

    pub fn ir_nodes(&self) -> &[usize] {
        &self.ir_nodes
    }

    /// Background field for a view and delay index.
    pub fn background(&self, view: usize, delay: usize) -> &[f64] {
        &self.delays[delay].background[view]
    }

    fn nodal(&self, p: &[f64]) -> Result<Vec<f64>> {
        check_len(p, self.ir_nodes.len())?;
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite parameter value".into()));
        }
        let mut out = vec![0.0; self.mesh.n_nodes()];
        for (&g, &v) in self.ir_nodes.iter().zip(p) {
            out[g] = v;
        }
        Ok(out)
    }

    /// Measurements by explicit perturbation solves (p in physical units on
    /// the IR nodes).
    pub fn evaluate_direct(&self, p: &[f64], linearized: bool) -> Result<Vec<f64>> {
        let p_nodal = self.nodal(p)?;
        let nv = self.geometry.views.len();
        let per_delay: Vec<Vec<Vec<f64>>> = self
            .delays
            .par_iter()
            .zip(&self.us.theta_samples)
            .map(|(d, &theta)| -> Result<Vec<Vec<f64>>> {
                let nonlinear_k = if linearized || d.a == 0.0 {
                    None
                } else {
                    Some(Factorization::new(
                        &self.ops.pattern,
                        operator_values(&self.ops, &self.props, &self.us, &p_nodal, theta),
                    )?)
                };
                (0..nv)
                    .into_par_iter()
                    .map(|v| {
                        // the right-hand side is the same in both modes; only the operator differs
                        let f = nonlinear_k.as_ref().unwrap_or(&d.k0);
                        let g = perturbation_from_background(
                            &self.ops,
                            &self.props,
                            &self.us,
                            &p_nodal,
                            theta,
                            &d.background[v],
                            true,
                            Some(f),
                        )?;
                        Ok(self.geometry.views[v].detectors.iter().map(|&i| g[i]).collect())
                    })
                    .collect()
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = Vec::with_capacity(self.n_measurements());
        for v in 0..nv {
            for k in 0..self.geometry.views[v].detectors.len() {
                let mut acc = Complex::new(0.0, 0.0);
                for (d, vals) in self.delays.iter().zip(&per_delay) {
                    acc += d.weight * vals[v][k];
                }
                out.push(acc.norm());
            }
        }
        Ok(out)
    }

    /// Sensitivity matrix of the linearized model, built on first use.
    pub fn sensitivity(&self) -> Result<&Sensitivity> {
        if let Some(s) = self.sensitivity.get() {
            return Ok(s);
        }
        let s = self.build_sensitivity()?;
        Ok(self.sensitivity.get_or_init(|| s))
    }

    fn build_sensitivity(&self) -> Result<Sensitivity> {
        let n = self.mesh.n_nodes();
        let np = self.ir_nodes.len();
        let mut local = vec![usize::MAX; n];
        for (k, &g) in self.ir_nodes.iter().enumerate() {
            local[g] = k;
        }
        let det_nodes = self.geometry.detector_nodes();
        // adjoint fields K0^-1 e_d; K0 is symmetric
        let adjoint: Vec<Vec<Vec<f64>>> = self
            .delays
            .par_iter()
            .map(|d| {
                det_nodes
                    .par_iter()
                    .map(|&i| {
                        let mut e = vec![0.0; n];
                        e[i] = 1.0;
                        d.k0.solve(&e)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let rows: Vec<(usize, usize)> = self
            .geometry
            .views
            .iter()
            .enumerate()
            .flat_map(|(v, view)| view.detectors.iter().map(move |&i| (v, i)))
            .collect();
        let row_data: Vec<Vec<Complex<f64>>> = rows
            .par_iter()
            .map(|&(v, node)| {
                let di = det_nodes.binary_search(&node).expect("detector node");
                let mut row = vec![Complex::new(0.0, 0.0); np];
                let mut t = vec![0.0; n];
                for (k, d) in self.delays.iter().enumerate() {
                    if d.a == 0.0 {
                        continue;
                    }
                    t.fill(0.0);
                    self.ops.weighted_mass_sensitivity(&adjoint[k][di], &d.background[v], &mut t);
                    let c = d.weight * (-d.a);
                    for (&g, r) in self.ir_nodes.iter().zip(row.iter_mut()) {
                        *r += c * t[g];
                    }
                }
                row
            })
            .collect();
        let m = rows.len();
        let re = DMatrix::from_fn(m, np, |i, j| row_data[i][j].re);
        let im = DMatrix::from_fn(m, np, |i, j| row_data[i][j].im);
        Ok(Sensitivity { re, im })
    }

    /// Linearized measurements through the sensitivity matrix.
    pub fn evaluate_linearized(&self, p: &[f64]) -> Result<Vec<f64>> {
        check_len(p, self.ir_nodes.len())?;
        Ok(self.sensitivity()?.apply(p))
    }
}

/// Evaluates the measurement operator for a physical field on a fresh model.
pub fn measurement_operator(
    mesh: &Mesh,
    props: &OpticalProps,
    us: &UltrasoundConfig,
    p: &crate::fem::ParameterField,
    detectors: &DetectorGeometry,
    linearized: bool,
) -> Result<MeasurementSet> {
    p.validate()?;
    let fwd = UmotForward::new(mesh.clone(), *props, us.clone(), detectors)?;
    let values = fwd.evaluate_direct(&p.values, linearized)?;
    let mut m = MeasurementSet::from_values(values, detectors)?;
    m.meta.radius = mesh.radius;
    m.meta.mesh_hash = mesh.content_hash();
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Linearized model through the sensitivity matrix.
    Linearized,
    /// Full perturbation solve with A p on the left-hand side.
    Nonlinear,
}

/// UMOT model on scaled parameters p~ = p / p_scale.
pub struct ScaledUmot<'a> {
    pub forward: &'a UmotForward,
    pub p_scale: f64,
    pub mode: ForwardMode,
}

impl ForwardOperator for ScaledUmot<'_> {
    fn n_params(&self) -> usize {
        self.forward.n_params()
    }
    fn n_measurements(&self) -> usize {
        self.forward.n_measurements()
    }
    fn evaluate(&self, p: &[f64]) -> Result<Vec<f64>> {
        let phys: Vec<f64> = p.iter().map(|v| v * self.p_scale).collect();
        match self.mode {
            ForwardMode::Linearized => self.forward.evaluate_linearized(&phys),
            ForwardMode::Nonlinear => self.forward.evaluate_direct(&phys, false),
        }
    }
}
