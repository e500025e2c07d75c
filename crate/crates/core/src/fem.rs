//! Piecewise-linear finite elements for the correlation diffusion equation
//!
//! ```text
//! -div(kappa grad G) + (mu_a + B(theta) + A(theta) I_IR p) G = S0 delta(r - r0)
//! G + kappa dG/dn = 0 on the boundary
//! ```
//!
//! and its perturbation form for the ultrasound-induced field G^delta.

use serde::{Deserialize, Serialize};
use sprs::{CsMat, FillInReduction};
use sprs_ldl::{Ldl, LdlNumeric};

use crate::error::{Error, Result};
use crate::mesh::Mesh;

/// Relative residual every direct solve must reach.
pub const SOLVE_RTOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpticalProps {
    /// Absorption coefficient (1/cm).
    pub mu_a: f64,
    /// Reduced scattering coefficient (1/cm).
    pub mu_s_prime: f64,
    /// Particle diffusion coefficient (cm^2/s).
    pub d_b: f64,
    /// Light wavenumber modulus (1/cm).
    pub k0: f64,
}

/// HeNe wavenumber 2*pi/632.8 nm, in 1/cm.
pub const HENE_K0: f64 = 2.0 * std::f64::consts::PI / 632.8e-7;

impl Default for OpticalProps {
    fn default() -> Self {
        OpticalProps {
            mu_a: 0.1,
            mu_s_prime: 8.0,
            d_b: 1e-9,
            k0: HENE_K0,
        }
    }
}

impl OpticalProps {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.mu_a, self.mu_s_prime, self.d_b, self.k0]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("optical properties must be positive: {self:?}")))
        }
    }

    /// Optical diffusion coefficient kappa = 1 / (3 (mu_a + mu_s')).
    pub fn kappa(&self) -> f64 {
        1.0 / (3.0 * (self.mu_a + self.mu_s_prime))
    }

    /// Brownian decorrelation term B(theta) = 2 mu_s' k0^2 D_B theta.
    pub fn brownian_term(&self, theta: f64) -> f64 {
        2.0 * self.mu_s_prime * self.k0 * self.k0 * self.d_b * theta
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UltrasoundConfig {
    /// Acoustic angular frequency (rad/s).
    pub omega_a: f64,
    /// Lumped constant c in A(theta).
    pub c_elasto: f64,
    /// Correlation delays (s), strictly increasing.
    pub theta_samples: Vec<f64>,
}

impl Default for UltrasoundConfig {
    fn default() -> Self {
        UltrasoundConfig {
            omega_a: 2.0 * std::f64::consts::PI * 1e6,
            c_elasto: 1.0,
            theta_samples: vec![1.25e-7, 2.5e-7, 3.75e-7, 5e-7],
        }
    }
}

impl UltrasoundConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega_a > 0.0 && self.omega_a.is_finite()) {
            return Err(Error::Config("omega_a must be positive".into()));
        }
        if !self.c_elasto.is_finite() {
            return Err(Error::Config("c_elasto must be finite".into()));
        }
        if self.theta_samples.is_empty() {
            return Err(Error::Config("theta_samples is empty".into()));
        }
        if self.theta_samples[0] < 0.0 || self.theta_samples.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(
                "theta_samples must be nonnegative and strictly increasing".into(),
            ));
        }
        Ok(())
    }

    /// A(theta) = c sin^2(omega_a theta / 2).
    pub fn a_theta(&self, theta: f64) -> f64 {
        let s = (0.5 * self.omega_a * theta).sin();
        self.c_elasto * s * s
    }
}

/// Nodal vibration amplitude p on the IR nodes of a mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterField {
    pub values: Vec<f64>,
    /// IR-local index to global node index.
    pub ir_nodes: Vec<usize>,
}

impl ParameterField {
    pub fn zeros(mesh: &Mesh) -> Self {
        let ir_nodes = mesh.ir_nodes();
        ParameterField {
            values: vec![0.0; ir_nodes.len()],
            ir_nodes,
        }
    }

    pub fn constant(mesh: &Mesh, value: f64) -> Self {
        let mut p = Self::zeros(mesh);
        p.values.fill(value);
        p
    }

    pub fn from_values(mesh: &Mesh, values: Vec<f64>) -> Result<Self> {
        let ir_nodes = mesh.ir_nodes();
        if values.len() != ir_nodes.len() {
            return Err(Error::Dimension(format!(
                "{} values for {} IR nodes",
                values.len(),
                ir_nodes.len()
            )));
        }
        Ok(ParameterField { values, ir_nodes })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Expands to a full nodal vector, zero outside the IR.
    pub fn to_nodal(&self, n_nodes: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_nodes];
        for (&g, &v) in self.ir_nodes.iter().zip(&self.values) {
            out[g] = v;
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Assembly("p must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Isotropic point source, lumped onto a node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointSource {
    pub node: usize,
    pub strength: f64,
}

impl PointSource {
    pub fn load(&self, n: usize) -> Vec<f64> {
        let mut q = vec![0.0; n];
        q[self.node] = self.strength;
        q
    }
}

/// Symmetric sparse operator K and load q.
#[derive(Debug, Clone)]
pub struct SparseSystem {
    pub k: CsMat<f64>,
    pub q: Vec<f64>,
}

/// Sorted CSR sparsity pattern of the mesh graph (including the diagonal).
#[derive(Debug, Clone, PartialEq)]
pub struct Pattern {
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
}

impl Pattern {
    pub fn from_mesh(mesh: &Mesh) -> Self {
        let n = mesh.n_nodes();
        let mut adj: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for t in &mesh.triangles {
            for &a in t {
                for &b in t {
                    adj[a].push(b);
                }
            }
        }
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        indptr.push(0);
        for row in adj.iter_mut() {
            row.sort_unstable();
            row.dedup();
            indices.extend_from_slice(row);
            indptr.push(indices.len());
        }
        Pattern { indptr, indices }
    }

    pub fn n(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    /// Position of entry (i, j) in the value array.
    pub fn slot(&self, i: usize, j: usize) -> usize {
        let row = &self.indices[self.indptr[i]..self.indptr[i + 1]];
        self.indptr[i] + row.binary_search(&j).expect("entry in pattern")
    }

    pub fn to_csmat(&self, values: Vec<f64>) -> CsMat<f64> {
        CsMat::new((self.n(), self.n()), self.indptr.clone(), self.indices.clone(), values)
    }

    pub fn matvec(&self, values: &[f64], x: &[f64]) -> Vec<f64> {
        (0..self.n())
            .map(|i| {
                (self.indptr[i]..self.indptr[i + 1])
                    .map(|s| values[s] * x[self.indices[s]])
                    .sum()
            })
            .collect()
    }
}

/// Per-element P1 data.
#[derive(Debug, Clone, Copy)]
struct ElementGeom {
    area: f64,
    grad: [[f64; 2]; 3],
}

/// Mesh-level operators that do not depend on coefficients, all on one pattern.
#[derive(Debug, Clone)]
pub struct FemOperators {
    pub pattern: Pattern,
    /// Integral of grad(phi_i) . grad(phi_j).
    pub stiffness: Vec<f64>,
    /// Integral of phi_i phi_j.
    pub mass: Vec<f64>,
    /// Boundary mass, lumped onto the diagonal.
    pub robin: Vec<f64>,
    elements: Vec<ElementGeom>,
    triangles: Vec<[usize; 3]>,
    /// Elements with all three vertices in the IR; the support of p.
    ir_elements: Vec<usize>,
}

impl FemOperators {
    pub fn build(mesh: &Mesh) -> Self {
        let pattern = Pattern::from_mesh(mesh);
        let mut stiffness = vec![0.0; pattern.nnz()];
        let mut mass = vec![0.0; pattern.nnz()];
        let mut robin = vec![0.0; pattern.nnz()];
        let mut elements = Vec::with_capacity(mesh.n_triangles());
        for (t, tri) in mesh.triangles.iter().enumerate() {
            let [a, b, c] = tri.map(|i| mesh.nodes[i]);
            let area = mesh.area(t);
            let inv = 1.0 / (2.0 * area);
            let grad = [
                [(b[1] - c[1]) * inv, (c[0] - b[0]) * inv],
                [(c[1] - a[1]) * inv, (a[0] - c[0]) * inv],
                [(a[1] - b[1]) * inv, (b[0] - a[0]) * inv],
            ];
            for i in 0..3 {
                for j in 0..3 {
                    let s = pattern.slot(tri[i], tri[j]);
                    stiffness[s] += area * (grad[i][0] * grad[j][0] + grad[i][1] * grad[j][1]);
                    mass[s] += area / 12.0 * if i == j { 2.0 } else { 1.0 };
                }
            }
            elements.push(ElementGeom { area, grad });
        }
        for e in &mesh.boundary_edges {
            let [a, b] = e.map(|i| mesh.nodes[i]);
            let len = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            // row-lumped; the consistent edge mass has positive off-diagonals
            // that dominate kappa*S for kappa << h and break positivity of G
            robin[pattern.slot(e[0], e[0])] += len / 2.0;
            robin[pattern.slot(e[1], e[1])] += len / 2.0;
        }
        let ir_elements = mesh
            .triangles
            .iter()
            .enumerate()
            .filter(|(_, t)| t.iter().all(|&i| mesh.ir_flags[i]))
            .map(|(k, _)| k)
            .collect();
        FemOperators {
            pattern,
            stiffness,
            mass,
            robin,
            elements,
            triangles: mesh.triangles.clone(),
            ir_elements,
        }
    }

    /// kappa*S + robin_coeff*R + reaction*M.
    pub fn combine(&self, kappa: f64, robin_coeff: f64, reaction: f64) -> Vec<f64> {
        self.stiffness
            .iter()
            .zip(&self.mass)
            .zip(&self.robin)
            .map(|((s, m), r)| kappa * s + robin_coeff * r + reaction * m)
            .collect()
    }

    /// Mass matrix weighted by a P1 coefficient field `w` (nodal, full length):
    /// entries are the exact integrals of w phi_i phi_j. Only elements
    /// touching the IR are visited, so `w` must vanish outside the IR.
    pub fn weighted_mass(&self, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.pattern.nnz()];
        self.add_weighted_mass(w, 1.0, &mut out);
        out
    }

    pub fn add_weighted_mass(&self, w: &[f64], scale: f64, out: &mut [f64]) {
        for &t in &self.ir_elements {
            let tri = self.triangles[t];
            let area = self.elements[t].area;
            let wl = tri.map(|i| w[i]);
            if wl.iter().all(|&v| v == 0.0) {
                continue;
            }
            for i in 0..3 {
                for j in 0..3 {
                    let v = (0..3)
                        .map(|k| wl[k] * triple_integral(i, j, k))
                        .sum::<f64>()
                        * area;
                    out[self.pattern.slot(tri[i], tri[j])] += scale * v;
                }
            }
        }
    }

    /// Returns the vector t with t_k = sum_ij u_i v_j int(phi_i phi_j phi_k)
    /// for every node k of the IR elements (zeros elsewhere): the sensitivity
    /// of u^T M_w v to the nodal weight w_k.
    pub fn weighted_mass_sensitivity(&self, u: &[f64], v: &[f64], out: &mut [f64]) {
        for &t in &self.ir_elements {
            let tri = self.triangles[t];
            let area = self.elements[t].area;
            let ul = tri.map(|i| u[i]);
            let vl = tri.map(|i| v[i]);
            for k in 0..3 {
                let mut acc = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        acc += ul[i] * vl[j] * triple_integral(i, j, k);
                    }
                }
                out[tri[k]] += acc * area;
            }
        }
    }

    pub fn element_gradients(&self, t: usize) -> [[f64; 2]; 3] {
        self.elements[t].grad
    }
}

/// Integral of phi_i phi_j phi_k over a triangle, divided by its area.
fn triple_integral(i: usize, j: usize, k: usize) -> f64 {
    if i == j && j == k {
        1.0 / 10.0
    } else if i == j || j == k || i == k {
        1.0 / 30.0
    } else {
        1.0 / 60.0
    }
}

/// LDL^T factorization of a symmetric positive definite operator.
pub struct Factorization {
    pattern_values: Vec<f64>,
    pattern: Pattern,
    ldl: LdlNumeric<f64, usize>,
}

impl std::fmt::Debug for Factorization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Factorization").field("n", &self.pattern.n()).finish()
    }
}

impl Factorization {
    /// Factorizes the operator given by `values` on `pattern`; fails if it is
    /// not positive definite.
    pub fn new(pattern: &Pattern, values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Assembly("operator has non-finite entries".into()));
        }
        let mat = pattern.to_csmat(values.clone());
        let ldl = Ldl::new()
            .fill_in_reduction(FillInReduction::ReverseCuthillMcKee)
            .numeric(mat.view())
            .map_err(|e| Error::Assembly(format!("factorization failed: {e:?}")))?;
        if let Some((i, d)) = ldl.d().iter().enumerate().find(|(_, d)| !(**d > 0.0)) {
            return Err(Error::Assembly(format!(
                "operator is not positive definite (pivot {i} = {d:e})"
            )));
        }
        Ok(Factorization {
            pattern_values: values,
            pattern: pattern.clone(),
            ldl,
        })
    }

    pub fn n(&self) -> usize {
        self.pattern.n()
    }

    /// Solves K x = b with one step of iterative refinement and checks the
    /// relative residual against [`SOLVE_RTOL`].
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let norm_b = norm(b);
        if norm_b == 0.0 {
            return Ok(vec![0.0; b.len()]);
        }
        let mut x: Vec<f64> = self.ldl.solve(b);
        let mut res = self.residual(&x, b);
        let mut rel = norm(&res) / norm_b;
        if rel > 1e-14 {
            let dx: Vec<f64> = self.ldl.solve(&res);
            for (xi, di) in x.iter_mut().zip(&dx) {
                *xi += di;
            }
            res = self.residual(&x, b);
            rel = norm(&res) / norm_b;
        }
        if !(rel <= SOLVE_RTOL) {
            return Err(Error::Solve {
                reason: "residual above tolerance".into(),
                residual: rel,
            });
        }
        Ok(x)
    }

    fn residual(&self, x: &[f64], b: &[f64]) -> Vec<f64> {
        let kx = self.pattern.matvec(&self.pattern_values, x);
        b.iter().zip(&kx).map(|(b, k)| b - k).collect()
    }

    pub fn relative_residual(&self, x: &[f64], b: &[f64]) -> f64 {
        norm(&self.residual(x, b)) / norm(b)
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Operator values of K(p, theta) on the operator pattern.
pub fn operator_values(
    ops: &FemOperators,
    props: &OpticalProps,
    us: &UltrasoundConfig,
    p_nodal: &[f64],
    theta: f64,
) -> Vec<f64> {
    let mut k = ops.combine(props.kappa(), 1.0, props.mu_a + props.brownian_term(theta));
    let a = us.a_theta(theta);
    if a != 0.0 {
        ops.add_weighted_mass(p_nodal, a, &mut k);
    }
    k
}

/// Assembles K(p) and the point-source load for one correlation delay.
pub fn assemble(
    mesh: &Mesh,
    props: &OpticalProps,
    us: &UltrasoundConfig,
    p: &ParameterField,
    theta: f64,
    source: &PointSource,
) -> Result<SparseSystem> {
    props.validate()?;
    us.validate()?;
    p.validate()?;
    if !(theta >= 0.0) {
        return Err(Error::Assembly(format!("theta must be nonnegative, got {theta}")));
    }
    let ops = FemOperators::build(mesh);
    let values = operator_values(&ops, props, us, &p.to_nodal(mesh.n_nodes()), theta);
    // positive definiteness check
    Factorization::new(&ops.pattern, values.clone())?;
    Ok(SparseSystem {
        k: ops.pattern.to_csmat(values),
        q: source.load(mesh.n_nodes()),
    })
}

/// Background field G = K(0)^-1 q.
pub fn solve_background(
    mesh: &Mesh,
    props: &OpticalProps,
    us: &UltrasoundConfig,
    theta: f64,
    source: &PointSource,
) -> Result<Vec<f64>> {
    props.validate()?;
    us.validate()?;
    let ops = FemOperators::build(mesh);
    let zero = vec![0.0; mesh.n_nodes()];
    let f = Factorization::new(&ops.pattern, operator_values(&ops, props, us, &zero, theta))?;
    f.solve(&source.load(mesh.n_nodes()))
}

/// Perturbation field G^delta. The right-hand side is -A(theta) M_p G; the
/// nonlinear mode keeps A I_IR p on the left-hand side, the linearized mode drops it.
pub fn solve_perturbation(
    mesh: &Mesh,
    props: &OpticalProps,
    us: &UltrasoundConfig,
    p: &ParameterField,
    theta: f64,
    source: &PointSource,
    linearized: bool,
) -> Result<Vec<f64>> {
    props.validate()?;
    us.validate()?;
    p.validate()?;
    let ops = FemOperators::build(mesh);
    let n = mesh.n_nodes();
    let zero = vec![0.0; n];
    let k0 = Factorization::new(&ops.pattern, operator_values(&ops, props, us, &zero, theta))?;
    let g = k0.solve(&source.load(n))?;
    let p_nodal = p.to_nodal(n);
    perturbation_from_background(&ops, props, us, &p_nodal, theta, &g, linearized, Some(&k0))
}

/// Solves for G^delta given the background field `g`. `k0` may carry the
/// factorization of K(0, theta) for reuse.
#[allow(clippy::too_many_arguments)]
pub(crate) fn perturbation_from_background(
    ops: &FemOperators,
    props: &OpticalProps,
    us: &UltrasoundConfig,
    p_nodal: &[f64],
    theta: f64,
    g: &[f64],
    linearized: bool,
    k0: Option<&Factorization>,
) -> Result<Vec<f64>> {
    let n = g.len();
    let a = us.a_theta(theta);
    if a == 0.0 || p_nodal.iter().all(|&v| v == 0.0) {
        return Ok(vec![0.0; n]);
    }
    let mp = ops.weighted_mass(p_nodal);
    let rhs: Vec<f64> = ops.pattern.matvec(&mp, g).iter().map(|v| -a * v).collect();
    if linearized {
        match k0 {
            Some(f) => f.solve(&rhs),
            None => {
                let zero = vec![0.0; n];
                Factorization::new(&ops.pattern, operator_values(ops, props, us, &zero, theta))?
                    .solve(&rhs)
            }
        }
    } else {
        Factorization::new(&ops.pattern, operator_values(ops, props, us, p_nodal, theta))?
            .solve(&rhs)
    }
}
