//! Localized element correctors, the multiscale flux space built from them,
//! source correctors for concentrated sources, and decay and inf-sup probes.
//!
//! All fine-scale quantities are vectors over the interior-edge DOFs of the
//! fine RT0 space. The multiscale basis function of coarse DOF `E` is
//! `prolong(Phi_E) - G_k Phi_E`, where the corrector `G_k Phi_E` is the sum of
//! the element correctors of the (at most two) coarse triangles adjacent to `E`.

use std::io::{BufRead, Write};
use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fem::{
    assemble_div, assemble_weighted_mass_values, interpolation_pi_h, l2_norm_flux, lambda, prolongation, LogBase,
    OperatorMatrix, PressureSpace, RtSpace,
};
use crate::fields::CellGridField;
use crate::mesh::{MeshHierarchy, Patch, NONE};
use crate::saddle::{
    build_constrained_system, ConstraintBlock, Redundancy, SaddleFactor, SaddleSystem, SolveOptions, SolveReport,
};
use crate::sparse::{dot, norm2, CsrMatrix};

/// Sparse fine flux vector with increasing indices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseVector {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseVector {
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i] = v;
        }
        out
    }

    /// Sum of two sparse vectors, `self` first.
    fn merged(&self, other: &SparseVector) -> SparseVector {
        let mut out = SparseVector::default();
        let (mut a, mut b) = (0, 0);
        while a < self.nnz() || b < other.nnz() {
            let ia = self.indices.get(a).copied().unwrap_or(usize::MAX);
            let ib = other.indices.get(b).copied().unwrap_or(usize::MAX);
            if ia == ib {
                out.indices.push(ia);
                out.values.push(self.values[a] + other.values[b]);
                a += 1;
                b += 1;
            } else if ia < ib {
                out.indices.push(ia);
                out.values.push(self.values[a]);
                a += 1;
            } else {
                out.indices.push(ib);
                out.values.push(other.values[b]);
                b += 1;
            }
        }
        out
    }
}

/// Fine and coarse operators of one hierarchy and coefficient.
pub struct Discretization<'a> {
    hierarchy: &'a MeshHierarchy,
    fine: RtSpace<'a>,
    coarse: RtSpace<'a>,
    coeff: Vec<f64>,
    mass: OperatorMatrix,
    div: OperatorMatrix,
    coarse_div: OperatorMatrix,
    pi_h: OperatorMatrix,
    prolong: OperatorMatrix,
    opts: SolveOptions,
}

impl<'a> Discretization<'a> {
    /// Assembles all operators for per-fine-triangle coefficient values.
    pub fn new(hierarchy: &'a MeshHierarchy, coeff: Vec<f64>, opts: SolveOptions) -> Result<Self> {
        if let Some((t, a)) = coeff.iter().enumerate().find(|(_, a)| !(**a > 0.0 && a.is_finite())) {
            return Err(Error::Domain(format!("coefficient {a} on fine triangle {t} is not positive and finite")));
        }
        let fine = RtSpace::new(hierarchy.fine());
        let coarse = RtSpace::new(hierarchy.coarse());
        let mass = assemble_weighted_mass_values(&fine, &coeff, true)?;
        let div = assemble_div(&fine, &PressureSpace::new(hierarchy.fine()), true);
        let coarse_div = assemble_div(&coarse, &PressureSpace::new(hierarchy.coarse()), false);
        Ok(Self {
            hierarchy,
            fine,
            coarse,
            coeff,
            mass,
            div,
            coarse_div,
            pi_h: interpolation_pi_h(hierarchy),
            prolong: prolongation(hierarchy),
            opts,
        })
    }

    /// Samples a cell coefficient on the fine mesh (alignment is checked).
    pub fn from_field(hierarchy: &'a MeshHierarchy, field: &CellGridField, opts: SolveOptions) -> Result<Self> {
        let coeff = field.eval_on_mesh(hierarchy.fine())?;
        Self::new(hierarchy, coeff, opts)
    }

    pub fn hierarchy(&self) -> &'a MeshHierarchy {
        self.hierarchy
    }
    pub fn fine_space(&self) -> &RtSpace<'a> {
        &self.fine
    }
    pub fn coarse_space(&self) -> &RtSpace<'a> {
        &self.coarse
    }
    pub fn coefficient(&self) -> &[f64] {
        &self.coeff
    }
    /// Weighted fine mass matrix `M`.
    pub fn mass(&self) -> &OperatorMatrix {
        &self.mass
    }
    /// Fine divergence `B`.
    pub fn div(&self) -> &OperatorMatrix {
        &self.div
    }
    /// Coarse divergence `B_H`.
    pub fn coarse_div(&self) -> &OperatorMatrix {
        &self.coarse_div
    }
    pub fn pi_h(&self) -> &OperatorMatrix {
        &self.pi_h
    }
    pub fn prolong(&self) -> &OperatorMatrix {
        &self.prolong
    }
    pub fn options(&self) -> SolveOptions {
        self.opts
    }

    /// Triangle integrals of `f` on the coarse mesh from those on the fine mesh.
    pub fn coarse_integrals(&self, f_fine: &[f64]) -> Vec<f64> {
        (0..self.hierarchy.coarse().num_triangles())
            .map(|t| self.hierarchy.children(t).iter().map(|&c| f_fine[c]).sum())
            .collect()
    }

    /// Fine triangle integrals of `P_H f`.
    pub fn coarse_projected_integrals(&self, f_fine: &[f64]) -> Vec<f64> {
        let h = self.hierarchy;
        let fc = self.coarse_integrals(f_fine);
        (0..h.fine().num_triangles())
            .map(|t| {
                let p = h.parent(t);
                fc[p] * h.fine().area(t) / h.coarse().area(p)
            })
            .collect()
    }

    /// `|||v|||`.
    pub fn energy_norm(&self, v: &[f64]) -> f64 {
        dot(v, &self.mass.apply(v)).max(0.0).sqrt()
    }

    /// `a(u, v)`.
    pub fn energy_inner(&self, u: &[f64], v: &[f64]) -> f64 {
        dot(u, &self.mass.apply(v))
    }

    /// Relative energy and `L2` errors of `u` against `u_ref`.
    pub fn relative_errors(&self, u_ref: &[f64], u: &[f64]) -> (f64, f64) {
        let diff: Vec<f64> = u_ref.iter().zip(u).map(|(a, b)| a - b).collect();
        let rel = |num: f64, den: f64| if den > 0.0 { num / den } else { num };
        (
            rel(self.energy_norm(&diff), self.energy_norm(u_ref)),
            rel(l2_norm_flux(&self.fine, &diff), l2_norm_flux(&self.fine, u_ref)),
        )
    }

    /// `||div u + f||_{L2} / ||f||_{L2}` for fine triangle integrals `f`
    /// (absolute if `f = 0`).
    pub fn divergence_residual(&self, u: &[f64], f_fine: &[f64]) -> f64 {
        let mesh = self.hierarchy.fine();
        let bu = self.div.apply(u);
        let (mut num, mut den) = (0.0, 0.0);
        for t in 0..mesh.num_triangles() {
            let a = mesh.area(t);
            num += (bu[t] + f_fine[t]).powi(2) / a;
            den += f_fine[t].powi(2) / a;
        }
        if den > 0.0 {
            (num / den).sqrt()
        } else {
            num.sqrt()
        }
    }

    /// Fine-scale rhs `a^T(v, .)` of a fine vector given through `value`, as
    /// unsorted `(fine DOF, value)` pairs.
    fn element_load(&self, t: usize, value: impl Fn(usize) -> f64) -> Vec<(usize, f64)> {
        let mut out = Vec::with_capacity(9 * self.hierarchy.children(t).len());
        for &c in self.hierarchy.children(t) {
            let local = self.fine.local_mass(c);
            let dofs = self.fine.local_dofs(c);
            let x: [f64; 3] = dofs.map(|(d, _)| d.map_or(0.0, &value));
            for j in 0..3 {
                if let Some(dj) = dofs[j].0 {
                    let s: f64 = (0..3).map(|i| local[j][i] * x[i]).sum();
                    out.push((dj, s / self.coeff[c]));
                }
            }
        }
        out
    }
}

fn check_compatible(f: &[f64]) -> Result<()> {
    let total: f64 = f.iter().sum();
    let scale: f64 = f.iter().map(|v| v.abs()).sum();
    if total.abs() > 1e-10 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::Domain(format!(
            "source integrates to {total:e}; pure flux boundary conditions need a zero-mean source"
        )));
    }
    Ok(())
}

/// Fine saddle problem on a patch with zero flux through the patch boundary:
/// divergence rows for every fine triangle and, optionally, `Pi_H` rows for
/// the coarse edges interior to the patch.
struct PatchProblem {
    /// Fine DOFs of the patch, increasing.
    dofs: Vec<usize>,
    /// Fine DOF -> local unknown, or `NONE`.
    col_map: Vec<usize>,
    fine_triangles: Vec<usize>,
    system: SaddleSystem,
}

impl PatchProblem {
    fn new(d: &Discretization, patch: &Patch) -> Result<Self> {
        let h = d.hierarchy;
        let dofs: Vec<usize> = h
            .patch_interior_fine_edges(patch)
            .into_iter()
            .map(|e| d.fine.edge_dof(e).expect("patch-interior edges are interior"))
            .collect();
        let mut col_map = vec![NONE; d.fine.dim()];
        for (k, &fd) in dofs.iter().enumerate() {
            col_map[fd] = k;
        }
        let n = dofs.len();
        let m = d.mass.matrix.submatrix(&dofs, &col_map, n);
        let fine_triangles = h.patch_fine_triangles(patch);
        let div = d.div.matrix.submatrix(&fine_triangles, &col_map, n);
        // the children of each coarse triangle sum to a combination of
        // Pi_H rows and patch-boundary fluxes, so one row per group is redundant
        let groups: Vec<Vec<usize>> = patch
            .coarse_triangles
            .iter()
            .map(|&ct| {
                let mut g: Vec<usize> = h
                    .children(ct)
                    .iter()
                    .map(|c| fine_triangles.binary_search(c).expect("child of a patch triangle"))
                    .collect();
                g.sort_unstable();
                g
            })
            .collect();
        let coarse_dofs: Vec<usize> = h
            .patch_interior_coarse_edges(patch)
            .into_iter()
            .map(|e| d.coarse.edge_dof(e).expect("patch-interior coarse edges are interior"))
            .collect();
        let pi = d.pi_h.matrix.submatrix(&coarse_dofs, &col_map, n);
        let system = build_constrained_system(
            m,
            vec![
                ConstraintBlock::new("divergence", div).with_redundancy(Redundancy::DropOnePerGroup(groups)),
                ConstraintBlock::new("interpolation", pi),
            ],
        )?;
        Ok(Self {
            dofs,
            col_map,
            fine_triangles,
            system,
        })
    }

    fn local_load(&self, load: &[(usize, f64)]) -> Vec<f64> {
        let mut g = vec![0.0; self.dofs.len()];
        for &(fd, v) in load {
            let k = self.col_map[fd];
            if k != NONE {
                g[k] += v;
            }
        }
        g
    }

    fn scatter(&self, x: &[f64]) -> SparseVector {
        let (indices, values) =
            self.dofs.iter().zip(x).filter(|(_, v)| **v != 0.0).map(|(&i, &v)| (i, v)).unzip();
        SparseVector { indices, values }
    }
}

/// Localized correctors `G_k Phi_E` of all coarse basis functions.
#[derive(Clone, Debug, Default)]
pub struct CorrectorBasis {
    /// Patch layers `k`.
    pub layers: usize,
    /// Corrector of each coarse flux DOF.
    pub correctors: Vec<SparseVector>,
    /// Coarse triangles of the union of the patches contributing to each corrector.
    pub supports: Vec<Vec<usize>>,
    /// Solve diagnostics of each coarse triangle's patch problem.
    pub reports: Vec<(usize, SolveReport)>,
}

impl CorrectorBasis {
    pub fn len(&self) -> usize {
        self.correctors.len()
    }
    pub fn is_empty(&self) -> bool {
        self.correctors.is_empty()
    }

    /// Columns `prolong(Phi_E) - G_k Phi_E` as an `n_fine x n_coarse` matrix.
    pub fn multiscale_matrix(&self, d: &Discretization) -> CsrMatrix {
        let mut triplets: Vec<(usize, usize, f64)> = d.prolong.matrix.triplets().collect();
        for (e, c) in self.correctors.iter().enumerate() {
            triplets.extend(c.indices.iter().zip(&c.values).map(|(&i, &v)| (i, e, -v)));
        }
        CsrMatrix::from_triplets(d.fine.dim(), d.coarse.dim(), &triplets)
    }

    /// Writes a plain-text form: header, then per coarse DOF its support and
    /// nonzero entries. Values use the shortest round-trip representation.
    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "correctors {} layers {}", self.correctors.len(), self.layers)?;
        for (e, (c, s)) in self.correctors.iter().zip(&self.supports).enumerate() {
            write!(w, "dof {e} support {}", s.len())?;
            for t in s {
                write!(w, " {t}")?;
            }
            writeln!(w, " nnz {}", c.nnz())?;
            for (i, v) in c.indices.iter().zip(&c.values) {
                writeln!(w, "{i} {v}")?;
            }
        }
        Ok(())
    }

    /// Reads the output of [`CorrectorBasis::write_text`]; reports are not stored.
    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let bad = |detail: String| Error::Parse {
            path: "<corrector basis>".into(),
            detail,
        };
        let mut lines = r.lines();
        let mut next = || -> Result<String> {
            match lines.next() {
                Some(l) => l.map_err(|e| Error::io("<corrector basis>", e)),
                None => Err(bad("unexpected end of input".into())),
            }
        };
        let num = |s: Option<&str>, what: &str| -> Result<usize> {
            s.and_then(|s| s.parse().ok()).ok_or_else(|| bad(format!("expected {what}")))
        };
        let header = next()?;
        let mut it = header.split_whitespace();
        if it.next() != Some("correctors") {
            return Err(bad(format!("bad header `{header}`")));
        }
        let count = num(it.next(), "corrector count")?;
        it.next();
        let layers = num(it.next(), "layer count")?;
        let mut out = CorrectorBasis {
            layers,
            ..Default::default()
        };
        for e in 0..count {
            let line = next()?;
            let tok: Vec<&str> = line.split_whitespace().collect();
            if tok.first() != Some(&"dof") || num(tok.get(1).copied(), "dof")? != e {
                return Err(bad(format!("expected record of dof {e}, got `{line}`")));
            }
            let ns = num(tok.get(3).copied(), "support size")?;
            let support = (0..ns).map(|k| num(tok.get(4 + k).copied(), "support triangle")).collect::<Result<_>>()?;
            let nnz = num(tok.get(5 + ns).copied(), "nnz")?;
            let mut c = SparseVector::default();
            for _ in 0..nnz {
                let l = next()?;
                let mut p = l.split_whitespace();
                c.indices.push(num(p.next(), "index")?);
                c.values.push(p.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad(format!("bad entry `{l}`")))?);
            }
            out.correctors.push(c);
            out.supports.push(support);
        }
        Ok(out)
    }
}

/// Localized element corrector `G^T_k v` of a coarse flux `v` on `U_k(T)`.
pub fn element_corrector(d: &Discretization, t: usize, k: usize, source: &[f64]) -> Result<Vec<f64>> {
    if source.len() != d.coarse.dim() {
        return Err(Error::Dimension(format!("coarse flux has {} entries, expected {}", source.len(), d.coarse.dim())));
    }
    let ctx = |e: Error| e.context(format!("element corrector of coarse triangle {t} with {k} layers"));
    let fine_v = d.prolong.apply(source);
    let problem = PatchProblem::new(d, &d.hierarchy.patch(t, k)).map_err(ctx)?;
    let g = problem.local_load(&d.element_load(t, |fd| fine_v[fd]));
    let r = vec![0.0; problem.system.constraint_rows()];
    let sol = problem.system.solve(&g, &r, d.opts).map_err(ctx)?;
    Ok(problem.scatter(&sol.primal).to_dense(d.fine.dim()))
}

type ElementResult = Result<(Vec<(usize, SparseVector)>, SolveReport), Error>;

fn element_correctors_on(
    d: &Discretization,
    t: usize,
    problem: &PatchProblem,
    factor: &SaddleFactor<'_>,
) -> ElementResult {
    let r = vec![0.0; problem.system.constraint_rows()];
    let mut out = Vec::with_capacity(3);
    let mut report = SolveReport::default();
    for (cd, _) in d.coarse.local_dofs(t) {
        let Some(cd) = cd else { continue };
        let load = d.element_load(t, |fd| d.prolong.matrix.get(fd, cd));
        let g = problem.local_load(&load);
        let sol = factor.solve(&g, &r)?;
        report = sol.report;
        out.push((cd, problem.scatter(&sol.primal)));
    }
    Ok((out, report))
}

/// Correctors of all coarse basis functions with `k`-layer patches.
///
/// Each coarse triangle's patch problem is factorized once for its three
/// local coarse DOFs. Saturated patches all share one factorization.
pub fn corrector_basis(d: &Discretization, k: usize) -> Result<CorrectorBasis> {
    let h = d.hierarchy;
    let nct = h.coarse().num_triangles();
    let patches: Vec<Patch> = (0..nct).map(|t| h.patch(t, k)).collect();
    let shared = match patches.iter().position(|p| p.is_saturated()) {
        Some(t) => Some(PatchProblem::new(d, &patches[t])?),
        None => None,
    };
    let shared_factor = match &shared {
        Some(p) => Some(p.system.factorize(d.opts).map_err(|e| e.context("saturated corrector problem"))?),
        None => None,
    };

    let results: Vec<ElementResult> = patches
        .par_iter()
        .enumerate()
        .map(|(t, patch)| {
            if patch.is_saturated() {
                let (p, f) = (shared.as_ref().unwrap(), shared_factor.as_ref().unwrap());
                element_correctors_on(d, t, p, f)
            } else {
                let problem = PatchProblem::new(d, patch)?;
                let factor = problem.system.factorize(d.opts)?;
                element_correctors_on(d, t, &problem, &factor)
            }
        })
        .collect();

    let mut failures = Vec::new();
    let mut first_error = None;
    let mut basis = CorrectorBasis {
        layers: k,
        correctors: vec![SparseVector::default(); d.coarse.dim()],
        supports: vec![Vec::new(); d.coarse.dim()],
        reports: Vec::with_capacity(nct),
    };
    for (t, res) in results.into_iter().enumerate() {
        match res {
            Ok((parts, report)) => {
                for (cd, c) in parts {
                    basis.correctors[cd] = basis.correctors[cd].merged(&c);
                    let s = &mut basis.supports[cd];
                    s.extend_from_slice(&patches[t].coarse_triangles);
                    s.sort_unstable();
                    s.dedup();
                }
                basis.reports.push((t, report));
            }
            Err(e) => {
                let dofs: Vec<usize> = d.coarse.local_dofs(t).iter().filter_map(|(c, _)| *c).collect();
                failures.push(format!("(T={t}, E={dofs:?})"));
                first_error.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_error {
        return Err(e.context(format!("corrector failures with {k} layers: {}", failures.join(", "))));
    }
    Ok(basis)
}

/// Fine flux, fine pressure and diagnostics of the reference solve.
#[derive(Clone, Debug)]
pub struct ReferenceSolution {
    pub flux: Vec<f64>,
    pub pressure: Vec<f64>,
    pub report: SolveReport,
}

/// Fine mixed solve with zero-mean pressure; `f_fine` holds the fine
/// triangle integrals of the source.
pub fn solve_reference(d: &Discretization, f_fine: &[f64]) -> Result<ReferenceSolution> {
    let mesh = d.hierarchy.fine();
    if f_fine.len() != mesh.num_triangles() {
        return Err(Error::Dimension(format!("{} source integrals for {} triangles", f_fine.len(), mesh.num_triangles())));
    }
    check_compatible(f_fine)?;
    let system = build_constrained_system(
        d.mass.matrix.clone(),
        vec![ConstraintBlock::new("divergence", d.div.matrix.clone())
            .with_redundancy(Redundancy::Gauge(mesh.areas().to_vec()))],
    )?;
    let r: Vec<f64> = f_fine.iter().map(|v| -v).collect();
    let sol = system
        .solve(&vec![0.0; d.fine.dim()], &r, d.opts)
        .map_err(|e| e.context("reference solve"))?;
    Ok(ReferenceSolution {
        flux: sol.primal,
        pressure: mesh.areas().iter().zip(&sol.multipliers).map(|(a, l)| l / a).collect(),
        report: sol.report,
    })
}

/// Fine flux, coarse pressure and coarse coefficients of a solve in a space
/// spanned by the columns of a fine matrix.
#[derive(Clone, Debug)]
pub struct MultiscaleSolution {
    pub flux: Vec<f64>,
    pub coarse_pressure: Vec<f64>,
    pub coefficients: Vec<f64>,
    pub report: SolveReport,
}

/// Solves the coarse saddle system with flux block `W^T M W` and `B_H`.
fn solve_in_span(d: &Discretization, w: &CsrMatrix, f_fine: &[f64], g: Option<&[f64]>) -> Result<MultiscaleSolution> {
    let h = d.hierarchy;
    if f_fine.len() != h.fine().num_triangles() {
        return Err(Error::Dimension(format!(
            "{} source integrals for {} triangles",
            f_fine.len(),
            h.fine().num_triangles()
        )));
    }
    check_compatible(f_fine)?;
    let k = w.transpose().matmul(&d.mass.matrix.matmul(w));
    let k = k.add(0.5, &k.transpose(), 0.5);
    let system = build_constrained_system(
        k,
        vec![ConstraintBlock::new("coarse divergence", d.coarse_div.matrix.clone())
            .with_redundancy(Redundancy::Gauge(h.coarse().areas().to_vec()))],
    )?;
    let r: Vec<f64> = d.coarse_integrals(f_fine).iter().map(|v| -v).collect();
    let zero = vec![0.0; d.coarse.dim()];
    let sol = system.solve(g.unwrap_or(&zero), &r, d.opts).map_err(|e| e.context("coarse solve"))?;
    Ok(MultiscaleSolution {
        flux: w.matvec(&sol.primal),
        coarse_pressure: h.coarse().areas().iter().zip(&sol.multipliers).map(|(a, l)| l / a).collect(),
        coefficients: sol.primal,
        report: sol.report,
    })
}

/// Galerkin solve in the localized multiscale space.
pub fn solve_multiscale(d: &Discretization, basis: &CorrectorBasis, f_fine: &[f64]) -> Result<MultiscaleSolution> {
    solve_in_span(d, &basis.multiscale_matrix(d), f_fine, None)
}

/// Standard coarse RT0 solve with the fine coefficient, returned on the fine mesh.
pub fn solve_standard_coarse(d: &Discretization, f_fine: &[f64]) -> Result<MultiscaleSolution> {
    solve_in_span(d, &d.prolong.matrix, f_fine, None)
}

/// `max(1, round(C sqrt(1 + log2(H/h)) log2(1/H)))`, halves rounded away from zero.
pub fn choose_k(coarse_h: f64, fine_h: f64, c: f64) -> Result<usize> {
    if !(fine_h > 0.0 && fine_h < coarse_h && coarse_h < 1.0) {
        return Err(Error::Domain(format!("need 0 < h < H < 1, got H={coarse_h}, h={fine_h}")));
    }
    if !(c >= 0.0 && c.is_finite()) {
        return Err(Error::Domain(format!("C={c} must be finite and nonnegative")));
    }
    let k = c * lambda(coarse_h / fine_h, LogBase::Two)? * (1.0 / coarse_h).log2();
    Ok((k.round() as usize).max(1))
}

/// [`choose_k`] for a hierarchy, capped at the saturation layer count.
pub fn choose_k_for(h: &MeshHierarchy, c: f64) -> Result<usize> {
    Ok(choose_k(h.coarse_size(), h.fine_size(), c)?.min(h.saturation_layers().max(1)))
}

/// Truncation errors of one element corrector against the ideal one.
#[derive(Clone, Debug)]
pub struct DecayReport {
    pub seed: usize,
    /// `d_k` for `k = 1..=k_max`.
    pub distances: Vec<f64>,
    /// `|||G^T v|||` of the ideal corrector.
    pub ideal_norm: f64,
    /// `L2` truncation errors relative to the `L2` norm of the ideal corrector.
    pub relative_l2: Vec<f64>,
    /// Largest `||B G^T_k v|| / ||v||` over the computed layers.
    pub divergence: f64,
    /// Fitted per-layer factor; `None` with fewer than two usable layers.
    pub theta: Option<f64>,
}

/// `d_k = |||G^T v - G^T_k v|||` for `k = 1..=k_max` and a least-squares fit
/// of `log d_k` against `k / lambda(H/h)`. Layers with `d_k` at the solver
/// floor (`1e-8 |||G^T v|||`) are left out of the fit.
pub fn decay_profile(d: &Discretization, t: usize, v: &[f64], k_max: usize) -> Result<DecayReport> {
    let h = d.hierarchy;
    let ideal = element_corrector(d, t, h.saturation_layers(), v)?;
    let ideal_norm = d.energy_norm(&ideal);
    let ideal_l2 = l2_norm_flux(&d.fine, &ideal);
    let v_norm = norm2(&d.prolong.apply(v)).max(f64::MIN_POSITIVE);
    let mut distances = Vec::with_capacity(k_max);
    let mut relative_l2 = Vec::with_capacity(k_max);
    let mut divergence: f64 = norm2(&d.div.apply(&ideal)) / v_norm;
    for k in 1..=k_max {
        let local = element_corrector(d, t, k, v)?;
        let diff: Vec<f64> = ideal.iter().zip(&local).map(|(a, b)| a - b).collect();
        distances.push(d.energy_norm(&diff));
        relative_l2.push(l2_norm_flux(&d.fine, &diff) / ideal_l2.max(f64::MIN_POSITIVE));
        divergence = divergence.max(norm2(&d.div.apply(&local)) / v_norm);
    }
    let lam = lambda(h.coarse_size() / h.fine_size(), LogBase::Two)?;
    let floor = 1e-8 * ideal_norm;
    let pts: Vec<(f64, f64)> = distances
        .iter()
        .enumerate()
        .filter(|(_, &dk)| dk > floor)
        .map(|(i, dk)| ((i + 1) as f64 / lam, dk.ln()))
        .collect();
    Ok(DecayReport {
        seed: t,
        distances,
        ideal_norm,
        relative_l2,
        divergence,
        theta: fit_slope(&pts).map(f64::exp),
    })
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Flux part of a localized source corrector.
#[derive(Clone, Debug)]
pub struct SourceCorrector {
    pub triangle: usize,
    pub layers: usize,
    pub flux: SparseVector,
}

/// Source corrector `F^{T,l} f` on `U_l(T)`: divergence `-(f - P_H f)` on the
/// children of `T`, zero elsewhere in the patch, `Pi_H`-free on interior
/// coarse edges. With `l = 0` the patch is `T` alone and no `Pi_H` rows occur.
pub fn source_corrector(d: &Discretization, t: usize, ell: usize, f_fine: &[f64]) -> Result<SourceCorrector> {
    let h = d.hierarchy;
    let ctx = |e: Error| e.context(format!("source corrector of coarse triangle {t} with {ell} layers"));
    let problem = PatchProblem::new(d, &h.patch(t, ell)).map_err(ctx)?;
    let total: f64 = h.children(t).iter().map(|&c| f_fine[c]).sum();
    let area = h.coarse().area(t);
    let mut r = vec![0.0; problem.system.constraint_rows()];
    for (row, &ft) in problem.fine_triangles.iter().enumerate() {
        if h.parent(ft) == t {
            r[row] = -(f_fine[ft] - h.fine().area(ft) / area * total);
        }
    }
    if r.iter().all(|v| *v == 0.0) {
        return Ok(SourceCorrector {
            triangle: t,
            layers: ell,
            flux: SparseVector::default(),
        });
    }
    let sol = problem
        .system
        .solve(&vec![0.0; problem.dofs.len()], &r, d.opts)
        .map_err(ctx)?;
    Ok(SourceCorrector {
        triangle: t,
        layers: ell,
        flux: problem.scatter(&sol.primal),
    })
}

/// Source correctors for every coarse triangle on which `f` is not zero.
pub fn source_correctors(d: &Discretization, ell: usize, f_fine: &[f64]) -> Result<Vec<SourceCorrector>> {
    let h = d.hierarchy;
    (0..h.coarse().num_triangles())
        .filter(|&t| h.children(t).iter().any(|&c| f_fine[c] != 0.0))
        .map(|t| {
            let mut ft = vec![0.0; f_fine.len()];
            for &c in h.children(t) {
                ft[c] = f_fine[c];
            }
            source_corrector(d, t, ell, &ft)
        })
        .collect()
}

/// Multiscale solve with rhs `-(f, q_H) - a(F f, v)`; returns `u_ms + F f`.
pub fn solve_multiscale_corrected(
    d: &Discretization,
    basis: &CorrectorBasis,
    f_fine: &[f64],
    correctors: &[SourceCorrector],
) -> Result<MultiscaleSolution> {
    let mut total = vec![0.0; d.fine.dim()];
    for c in correctors {
        for (&i, &v) in c.flux.indices.iter().zip(&c.flux.values) {
            total[i] += v;
        }
    }
    let w = basis.multiscale_matrix(d);
    let g: Vec<f64> = w.matvec_transpose(&d.mass.apply(&total)).iter().map(|v| -v).collect();
    let mut sol = solve_in_span(d, &w, f_fine, Some(&g))?;
    sol.flux.iter_mut().zip(&total).for_each(|(u, f)| *u += f);
    Ok(sol)
}

/// Smallest nonzero generalized singular value of a divergence operator.
#[derive(Clone, Debug, PartialEq)]
pub struct InfSupEstimate {
    /// `None` if every singular value vanishes.
    pub value: Option<f64>,
    /// Number of (numerically) zero singular values, e.g. the pressure gauge.
    pub kernel_dim: usize,
    pub largest: f64,
}

/// Square roots of the eigenvalues of `Q^{-1/2} B N^{-1} B^T Q^{-1/2}` for an
/// SPD flux norm matrix `N` and diagonal pressure mass `Q`; eigenvalues below
/// `1e-10` times the largest count as zero. Dense, for small problems only.
pub fn infsup_estimate(norm: &DMatrix<f64>, b: &DMatrix<f64>, pressure_mass: &[f64]) -> Result<InfSupEstimate> {
    let (m, n) = b.shape();
    if norm.shape() != (n, n) || pressure_mass.len() != m {
        return Err(Error::Dimension(format!(
            "norm {:?}, divergence {m}x{n}, pressure mass {}",
            norm.shape(),
            pressure_mass.len()
        )));
    }
    if m == 0 {
        return Ok(InfSupEstimate {
            value: None,
            kernel_dim: 0,
            largest: 0.0,
        });
    }
    let mut s = DMatrix::zeros(m, m);
    if n > 0 {
        let chol = norm
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NumericalAssembly("flux norm matrix is not positive definite".into()))?;
        let x = chol.solve(&b.transpose());
        s = b * x;
    }
    for i in 0..m {
        for j in 0..m {
            s[(i, j)] /= (pressure_mass[i] * pressure_mass[j]).sqrt();
        }
    }
    let s = (&s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::new(s).eigenvalues;
    let largest = eig.iter().copied().fold(0.0, f64::max);
    let cut = 1e-10 * largest;
    let nonzero: Vec<f64> = eig.iter().copied().filter(|&l| l > cut && largest > 0.0).collect();
    Ok(InfSupEstimate {
        value: nonzero.iter().copied().reduce(f64::min).map(f64::sqrt),
        kernel_dim: m - nonzero.len(),
        largest: largest.max(0.0).sqrt(),
    })
}

/// `H(div)` norm matrix `M_{A=1} + B^T diag(1/|t|) B` of an RT0 space.
pub fn hdiv_norm_matrix(space: &RtSpace, fine: bool) -> Result<CsrMatrix> {
    let mesh = space.mesh();
    let m1 = assemble_weighted_mass_values(space, &vec![1.0; mesh.num_triangles()], fine)?;
    let b = assemble_div(space, &PressureSpace::new(mesh), fine).matrix;
    let inv: Vec<f64> = mesh.areas().iter().map(|a| 1.0 / a).collect();
    let mut bs = b.clone();
    bs.scale_rows(&inv);
    Ok(m1.matrix.add(1.0, &b.transpose().matmul(&bs), 1.0))
}

/// Inf-sup probe of the standard coarse pair `(V_H, Q_H)`.
pub fn coarse_infsup(d: &Discretization) -> Result<InfSupEstimate> {
    let n = hdiv_norm_matrix(&d.coarse, false)?.to_dense();
    let b = d.coarse_div.matrix.to_dense();
    infsup_estimate(&n, &b, d.hierarchy.coarse().areas())
}

/// Inf-sup probe of the multiscale pair `(V^{ms,k}, Q_H)` with the fine `H(div)` norm.
pub fn multiscale_infsup(d: &Discretization, basis: &CorrectorBasis) -> Result<InfSupEstimate> {
    let w = basis.multiscale_matrix(d);
    let nf = hdiv_norm_matrix(&d.fine, true)?;
    let n = w.transpose().matmul(&nf.matmul(&w)).to_dense();
    let b = d.coarse_div.matrix.to_dense();
    infsup_estimate(&n, &b, d.hierarchy.coarse().areas())
}

/// Wall-clock seconds of a closure, for phase timings.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}
