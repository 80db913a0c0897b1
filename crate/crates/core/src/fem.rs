//! Lowest-order Raviart-Thomas fluxes, piecewise-constant pressures, their
//! bilinear forms and the coarse/fine transfer operators.
//!
//! Flux degrees of freedom are the mean normal fluxes through interior edges
//! (boundary fluxes vanish). On triangle `t` the basis function of its local
//! edge `i`, opposite to vertex `p_i`, is `s |e_i| / (2 |t|) (x - p_i)` where
//! `s = +1` if the edge normal points out of `t`.

use crate::error::{Error, Result};
use crate::fields::CellGridField;
use crate::mesh::{MeshHierarchy, TriMesh, NONE};
use crate::sparse::{dot, CsrMatrix};

/// Which discrete space a matrix dimension refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Space {
    FineFlux,
    CoarseFlux,
    FinePressure,
    CoarsePressure,
}

/// A sparse matrix tagged with the spaces of its rows and columns.
#[derive(Clone, Debug)]
pub struct OperatorMatrix {
    pub rows: Space,
    pub cols: Space,
    pub matrix: CsrMatrix,
}

impl OperatorMatrix {
    pub fn new(rows: Space, cols: Space, matrix: CsrMatrix) -> Self {
        Self { rows, cols, matrix }
    }

    /// Applies the operator to a vector of the column space.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matrix.matvec(x)
    }

    /// Applies the transpose to a vector of the row space.
    pub fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        self.matrix.matvec_transpose(x)
    }

    /// `self * rhs`; panics if the inner spaces differ.
    pub fn compose(&self, rhs: &OperatorMatrix) -> OperatorMatrix {
        assert_eq!(
            self.cols, rhs.rows,
            "space mismatch: {:?} -> {:?} composed with {:?} -> {:?}",
            rhs.cols, rhs.rows, self.cols, self.rows
        );
        OperatorMatrix::new(self.rows, rhs.cols, self.matrix.matmul(&rhs.matrix))
    }

    pub fn transpose(&self) -> OperatorMatrix {
        OperatorMatrix::new(self.cols, self.rows, self.matrix.transpose())
    }
}

/// RT0 degrees of freedom on the interior edges of a mesh.
#[derive(Clone, Debug)]
pub struct RtSpace<'a> {
    mesh: &'a TriMesh,
    dof_edges: Vec<usize>,
    edge_dofs: Vec<usize>,
}

impl<'a> RtSpace<'a> {
    pub fn new(mesh: &'a TriMesh) -> Self {
        let mut edge_dofs = vec![NONE; mesh.num_edges()];
        let mut dof_edges = Vec::new();
        for e in 0..mesh.num_edges() {
            if !mesh.is_boundary_edge(e) {
                edge_dofs[e] = dof_edges.len();
                dof_edges.push(e);
            }
        }
        Self {
            mesh,
            dof_edges,
            edge_dofs,
        }
    }

    pub fn mesh(&self) -> &'a TriMesh {
        self.mesh
    }
    pub fn dim(&self) -> usize {
        self.dof_edges.len()
    }
    /// Edge carrying DOF `d`.
    pub fn dof_edge(&self, d: usize) -> usize {
        self.dof_edges[d]
    }
    /// DOF of edge `e`, or `None` on the boundary.
    pub fn edge_dof(&self, e: usize) -> Option<usize> {
        let d = self.edge_dofs[e];
        (d != NONE).then_some(d)
    }

    /// Local DOFs of triangle `t` with orientation signs; boundary edges give `None`.
    pub fn local_dofs(&self, t: usize) -> [(Option<usize>, f64); 3] {
        let edges = self.mesh.triangle_edges(t);
        std::array::from_fn(|i| (self.edge_dof(edges[i]), self.mesh.orientation(t, i)))
    }

    /// Mass matrix of the three local basis functions of `t` for `A = 1`,
    /// including orientation signs.
    pub fn local_mass(&self, t: usize) -> [[f64; 3]; 3] {
        let m = self.mesh;
        let pts = m.triangle_points(t);
        let edges = m.triangle_edges(t);
        let area = m.area(t);
        let mids: [[f64; 2]; 3] = std::array::from_fn(|k| {
            let (a, b) = (pts[(k + 1) % 3], pts[(k + 2) % 3]);
            [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]
        });
        let scale: [f64; 3] =
            std::array::from_fn(|i| m.orientation(t, i) * m.edge_length(edges[i]) / (2.0 * area));
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in i..3 {
                // mid-edge rule, exact for quadratics
                let mut s = 0.0;
                for mid in &mids {
                    let di = [mid[0] - pts[i][0], mid[1] - pts[i][1]];
                    let dj = [mid[0] - pts[j][0], mid[1] - pts[j][1]];
                    s += di[0] * dj[0] + di[1] * dj[1];
                }
                let v = scale[i] * scale[j] * s * area / 3.0;
                out[i][j] = v;
                out[j][i] = v;
            }
        }
        out
    }

    /// Value of the flux `v` at point `x` of triangle `t`.
    pub fn eval(&self, v: &[f64], t: usize, x: [f64; 2]) -> [f64; 2] {
        let m = self.mesh;
        let pts = m.triangle_points(t);
        let edges = m.triangle_edges(t);
        let area = m.area(t);
        let mut out = [0.0; 2];
        for (i, (dof, sign)) in self.local_dofs(t).into_iter().enumerate() {
            if let Some(d) = dof {
                let c = v[d] * sign * m.edge_length(edges[i]) / (2.0 * area);
                out[0] += c * (x[0] - pts[i][0]);
                out[1] += c * (x[1] - pts[i][1]);
            }
        }
        out
    }

    /// DOFs of the constant field `c`; exact only if `c . n` vanishes on the boundary.
    pub fn interpolate_constant(&self, c: [f64; 2]) -> Vec<f64> {
        self.dof_edges
            .iter()
            .map(|&e| {
                let n = self.mesh.normal(e);
                c[0] * n[0] + c[1] * n[1]
            })
            .collect()
    }

    /// Largest flux magnitude over triangle centroids.
    pub fn max_centroid_flux(&self, v: &[f64]) -> f64 {
        (0..self.mesh.num_triangles())
            .map(|t| {
                let u = self.eval(v, t, self.mesh.centroid(t));
                u[0].hypot(u[1])
            })
            .fold(0.0, f64::max)
    }
}

/// Piecewise constants on the triangles of a mesh.
#[derive(Clone, Debug)]
pub struct PressureSpace<'a> {
    mesh: &'a TriMesh,
}

impl<'a> PressureSpace<'a> {
    pub fn new(mesh: &'a TriMesh) -> Self {
        Self { mesh }
    }
    pub fn dim(&self) -> usize {
        self.mesh.num_triangles()
    }
    /// Weights `|t|` of the zero-mean gauge `sum |t| q_t = 0`.
    pub fn gauge_weights(&self) -> Vec<f64> {
        self.mesh.areas().to_vec()
    }
    /// `q - mean(q)`.
    pub fn remove_mean(&self, q: &[f64]) -> Vec<f64> {
        let a = self.mesh.areas();
        let mean = dot(a, q) / self.mesh.total_area();
        q.iter().map(|v| v - mean).collect()
    }
    /// `L2` norm of a piecewise constant.
    pub fn l2_norm(&self, q: &[f64]) -> f64 {
        self.mesh.areas().iter().zip(q).map(|(a, v)| a * v * v).sum::<f64>().sqrt()
    }
}

fn space_of(mesh_is_fine: bool, flux: bool) -> Space {
    match (mesh_is_fine, flux) {
        (true, true) => Space::FineFlux,
        (false, true) => Space::CoarseFlux,
        (true, false) => Space::FinePressure,
        (false, false) => Space::CoarsePressure,
    }
}

/// `M[e,e'] = sum_t A_t^{-1} int_t Phi_e . Phi_e'` for per-triangle coefficient values.
pub fn assemble_weighted_mass_values(space: &RtSpace, coeff: &[f64], fine: bool) -> Result<OperatorMatrix> {
    let mesh = space.mesh();
    if coeff.len() != mesh.num_triangles() {
        return Err(Error::Dimension(format!(
            "{} coefficient values for {} triangles",
            coeff.len(),
            mesh.num_triangles()
        )));
    }
    let mut triplets = Vec::with_capacity(9 * mesh.num_triangles());
    for (t, &a) in coeff.iter().enumerate() {
        let local = space.local_mass(t);
        let dofs = space.local_dofs(t);
        for i in 0..3 {
            let Some(di) = dofs[i].0 else { continue };
            for j in 0..3 {
                let Some(dj) = dofs[j].0 else { continue };
                triplets.push((di, dj, local[i][j] / a));
            }
        }
    }
    let s = space_of(fine, true);
    Ok(OperatorMatrix::new(s, s, CsrMatrix::from_triplets(space.dim(), space.dim(), &triplets)))
}

/// Weighted mass matrix of the fine flux space for a cell coefficient.
pub fn assemble_weighted_mass(space: &RtSpace, field: &CellGridField) -> Result<OperatorMatrix> {
    let coeff = field.eval_on_mesh(space.mesh())?;
    assemble_weighted_mass_values(space, &coeff, true)
}

/// `B[t,e] = int_t div Phi_e = +-|e|`.
pub fn assemble_div(space: &RtSpace, pressure: &PressureSpace, fine: bool) -> OperatorMatrix {
    let mesh = space.mesh();
    assert!(std::ptr::eq(mesh, pressure.mesh), "flux and pressure spaces live on different meshes");
    let mut rows = Vec::with_capacity(mesh.num_triangles());
    for t in 0..mesh.num_triangles() {
        let edges = mesh.triangle_edges(t);
        let mut row: Vec<(usize, f64)> = space
            .local_dofs(t)
            .iter()
            .enumerate()
            .filter_map(|(i, &(d, s))| d.map(|d| (d, s * mesh.edge_length(edges[i]))))
            .collect();
        row.sort_by_key(|&(d, _)| d);
        rows.push(row);
    }
    OperatorMatrix::new(
        space_of(fine, false),
        space_of(fine, true),
        CsrMatrix::from_rows(space.dim(), rows),
    )
}

/// Coarse interpolation: `(Pi_H v)_E` is the mean normal flux of `v` through `E`.
pub fn interpolation_pi_h(h: &MeshHierarchy) -> OperatorMatrix {
    let coarse = RtSpace::new(h.coarse());
    let fine = RtSpace::new(h.fine());
    let mut rows = Vec::with_capacity(coarse.dim());
    for d in 0..coarse.dim() {
        let e = coarse.dof_edge(d);
        let len = h.coarse().edge_length(e);
        let mut row: Vec<(usize, f64)> = h
            .coarse_edge_pieces(e)
            .iter()
            .map(|p| {
                let fd = fine.edge_dof(p.fine_edge).expect("interior coarse edge has interior pieces");
                (fd, p.sign * h.fine().edge_length(p.fine_edge) / len)
            })
            .collect();
        row.sort_by_key(|&(c, _)| c);
        rows.push(row);
    }
    OperatorMatrix::new(Space::CoarseFlux, Space::FineFlux, CsrMatrix::from_rows(fine.dim(), rows))
}

/// `L2` projection onto coarse piecewise constants: `(P_H q)_T = sum_{t in T} |t| q_t / |T|`.
pub fn projection_p_h(h: &MeshHierarchy) -> OperatorMatrix {
    let rows = (0..h.coarse().num_triangles())
        .map(|t| {
            let area = h.coarse().area(t);
            let mut row: Vec<(usize, f64)> =
                h.children(t).iter().map(|&c| (c, h.fine().area(c) / area)).collect();
            row.sort_by_key(|&(c, _)| c);
            row
        })
        .collect();
    OperatorMatrix::new(
        Space::CoarsePressure,
        Space::FinePressure,
        CsrMatrix::from_rows(h.fine().num_triangles(), rows),
    )
}

/// Injection of coarse piecewise constants into the fine mesh.
pub fn inject_pressure(h: &MeshHierarchy, q: &[f64]) -> Vec<f64> {
    h.parents().iter().map(|&p| q[p]).collect()
}

/// Matrix of the embedding `V_H -> V_h`: fine DOF `e` of coarse `v` is `v(mid e) . n_e`.
pub fn prolongation(h: &MeshHierarchy) -> OperatorMatrix {
    let coarse = RtSpace::new(h.coarse());
    let fine = RtSpace::new(h.fine());
    let fm = h.fine();
    let mut triplets = Vec::new();
    let mut unit = vec![0.0; coarse.dim()];
    for fd in 0..fine.dim() {
        let e = fine.dof_edge(fd);
        if let Some((ce, sign)) = h.fine_edge_parent(e) {
            // exact: the normal flux of Phi_E is 1 on E and 0 on the other coarse edges
            if let Some(cd) = coarse.edge_dof(ce) {
                triplets.push((fd, cd, sign));
            }
            continue;
        }
        let t = fm.edge_triangles(e)[0];
        let ct = h.parent(t);
        let mid = fm.edge_midpoint(e);
        let n = fm.normal(e);
        for (cd, _) in coarse.local_dofs(ct) {
            let Some(cd) = cd else { continue };
            unit[cd] = 1.0;
            let v = coarse.eval(&unit, ct, mid);
            unit[cd] = 0.0;
            let val = v[0] * n[0] + v[1] * n[1];
            if val != 0.0 {
                triplets.push((fd, cd, val));
            }
        }
    }
    OperatorMatrix::new(
        Space::FineFlux,
        Space::CoarseFlux,
        CsrMatrix::from_triplets(fine.dim(), coarse.dim(), &triplets),
    )
}

/// `sqrt(v^T M v)`; a quadratic form below `-1e-12` is an assembly error.
pub fn energy_norm(m: &OperatorMatrix, v: &[f64]) -> Result<f64> {
    let q = dot(v, &m.apply(v));
    if q < -1e-12 {
        return Err(Error::NumericalAssembly(format!("negative quadratic form {q:e}")));
    }
    Ok(q.max(0.0).sqrt())
}

/// Squared energy norm of `v` restricted to the given triangles.
pub fn energy_norm_sq_on(space: &RtSpace, coeff: &[f64], v: &[f64], triangles: &[usize]) -> f64 {
    triangles
        .iter()
        .map(|&t| {
            let local = space.local_mass(t);
            let x: [f64; 3] = space.local_dofs(t).map(|(d, _)| d.map_or(0.0, |d| v[d]));
            let mut s = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    s += x[i] * local[i][j] * x[j];
                }
            }
            s / coeff[t]
        })
        .sum()
}

/// Unweighted `L2` norm of a flux.
pub fn l2_norm_flux(space: &RtSpace, v: &[f64]) -> f64 {
    let ones = vec![1.0; space.mesh().num_triangles()];
    let all: Vec<usize> = (0..space.mesh().num_triangles()).collect();
    energy_norm_sq_on(space, &ones, v, &all).max(0.0).sqrt()
}

/// `L2` norm of a piecewise-constant pressure.
pub fn l2_norm_pressure(pressure: &PressureSpace, q: &[f64]) -> f64 {
    pressure.l2_norm(q)
}

/// `|| div u + P_h f ||_{L2}` given `B u` and the triangle integrals of `f`.
pub fn div_l2_error(mesh: &TriMesh, bu: &[f64], f_integrals: &[f64]) -> f64 {
    (0..mesh.num_triangles())
        .map(|t| {
            let a = mesh.area(t);
            let r = (bu[t] + f_integrals[t]) / a;
            a * r * r
        })
        .sum::<f64>()
        .sqrt()
}

/// Logarithm base used by [`lambda`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogBase {
    Natural,
    Two,
}

/// `(1 + log(H/h))^{1/2}`.
pub fn lambda(h_ratio: f64, base: LogBase) -> Result<f64> {
    if !(h_ratio >= 1.0) {
        return Err(Error::Domain(format!("mesh size ratio {h_ratio} is below 1")));
    }
    let l = match base {
        LogBase::Natural => h_ratio.ln(),
        LogBase::Two => h_ratio.log2(),
    };
    Ok((1.0 + l).sqrt())
}
