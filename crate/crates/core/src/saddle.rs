//! Constrained quadratic minimization through symmetric indefinite
//! (KKT) factorizations.
//!
//! A [`SaddleSystem`] couples an SPD matrix `M` with stacked constraint blocks
//! `C` and is solved as
//!
//! ```text
//! [ M  C^T ] [u]   [g]
//! [ C   0  ] [l] = [r]
//! ```
//!
//! Known linear dependencies between constraint rows are removed before the
//! factorization, either by the caller ([`Redundancy::DropOnePerGroup`],
//! [`Redundancy::Gauge`]) or automatically for exact duplicate and empty rows.
//! The remaining matrix is factorized as `L D L^T` without pivoting in an
//! ordering where every constraint row follows all of its primal unknowns. Each
//! leading block is then itself a KKT matrix with full row rank, so the
//! factorization exists, `D` is positive on primal and negative on dual
//! positions, and a pivot of the wrong sign or of negligible size pins down a
//! dependent constraint row.

use std::collections::HashMap;
use std::time::Instant;

use faer::dyn_stack::{MemBuffer, MemStack, StackReq};
use faer::linalg::cholesky::ldlt::factor::{LdltError, LdltRegularization};
use faer::sparse::linalg::amd;
use faer::sparse::linalg::cholesky::{
    factorize_symbolic_cholesky, supernodal::SupernodalLdltRef, CholeskySymbolicParams, LdltRef,
    SymbolicCholesky, SymbolicCholeskyRaw, SymmetricOrdering,
};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::{Conj, MatMut, Par, Side};

use crate::error::{Error, Result};
use crate::sparse::{norm_inf, CsrMatrix};

/// Known dependencies among the rows of one constraint block.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum Redundancy {
    /// The rows are independent.
    #[default]
    None,
    /// Each listed group of row indices contains exactly one redundant row;
    /// the last row of every group is dropped.
    DropOnePerGroup(Vec<Vec<usize>>),
    /// The rows sum to zero (constant left null vector). The last row is dropped
    /// and the multipliers of the block are normalized to `weights . l = 0`.
    Gauge(Vec<f64>),
}

/// A named block of constraint rows `C_b u = r_b`.
#[derive(Clone, Debug)]
pub struct ConstraintBlock {
    pub name: String,
    pub matrix: CsrMatrix,
    pub redundancy: Redundancy,
}

impl ConstraintBlock {
    pub fn new(name: impl Into<String>, matrix: CsrMatrix) -> Self {
        Self {
            name: name.into(),
            matrix,
            redundancy: Redundancy::None,
        }
    }

    pub fn with_redundancy(mut self, redundancy: Redundancy) -> Self {
        self.redundancy = redundancy;
        self
    }
}

/// Solver settings.
#[derive(Clone, Copy, Debug)]
pub struct SolveOptions {
    /// Required normwise relative residual of the KKT system.
    pub tol: f64,
    /// Smallest admissible `|d|` of a pivot of the scaled system.
    pub pivot_tol: f64,
    /// Maximum number of iterative refinement steps.
    pub max_refinement: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            pivot_tol: 1e-12,
            max_refinement: 4,
        }
    }
}

/// Diagnostics of one solve.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SolveReport {
    /// `||b - K x||_inf / (||K||_inf ||x||_inf + ||b||_inf)` of the reduced system.
    pub relative_residual: f64,
    pub refinement_steps: usize,
    pub primal_dim: usize,
    pub constraint_rows: usize,
    pub dropped_rows: usize,
    pub factor_nnz: usize,
    pub factor_seconds: f64,
    pub solve_seconds: f64,
}

/// Primal solution, multipliers (one per original constraint row, dropped rows
/// get `0` before any gauge shift) and diagnostics.
#[derive(Clone, Debug)]
pub struct SaddleSolution {
    pub primal: Vec<f64>,
    pub multipliers: Vec<f64>,
    pub report: SolveReport,
}

/// An SPD block with stacked constraint blocks, ready to be factorized.
#[derive(Clone, Debug)]
pub struct SaddleSystem {
    m: CsrMatrix,
    blocks: Vec<ConstraintBlock>,
    /// Offsets of the blocks in the stacked row numbering.
    block_offsets: Vec<usize>,
    /// Stacked rows that take part in the factorization.
    kept: Vec<usize>,
    /// For every dropped duplicate row, the kept row it repeats.
    duplicates: Vec<(usize, usize)>,
    c: CsrMatrix,
    gauge: Option<(usize, Vec<f64>)>,
}

/// Stacks the constraint blocks and removes declared and exact redundancies.
pub fn build_constrained_system(m: CsrMatrix, blocks: Vec<ConstraintBlock>) -> Result<SaddleSystem> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::Dimension(format!("flux block is {}x{}", n, m.ncols())));
    }
    let mut block_offsets = vec![0];
    let mut gauge = None;
    let mut dropped = Vec::new();
    for (b, block) in blocks.iter().enumerate() {
        let rows = block.matrix.nrows();
        if block.matrix.ncols() != n {
            return Err(Error::Dimension(format!(
                "constraint block `{}` has {} columns, expected {n}",
                block.name,
                block.matrix.ncols()
            )));
        }
        let off = *block_offsets.last().unwrap();
        match &block.redundancy {
            Redundancy::None => {}
            Redundancy::DropOnePerGroup(groups) => {
                for g in groups {
                    if let Some(&last) = g.last() {
                        if last >= rows {
                            return Err(Error::Dimension(format!(
                                "redundancy group of block `{}` names row {last} of {rows}",
                                block.name
                            )));
                        }
                        dropped.push(off + last);
                    }
                }
            }
            Redundancy::Gauge(weights) => {
                if weights.len() != rows {
                    return Err(Error::Dimension(format!(
                        "gauge of block `{}` has {} weights for {rows} rows",
                        block.name,
                        weights.len()
                    )));
                }
                if gauge.is_some() {
                    return Err(Error::Config("only one gauged block is supported".into()));
                }
                if rows > 0 {
                    dropped.push(off + rows - 1);
                }
                gauge = Some((b, weights.clone()));
            }
        }
        block_offsets.push(off + rows);
    }
    let total = *block_offsets.last().unwrap();
    let mut is_dropped = vec![false; total];
    for d in dropped {
        is_dropped[d] = true;
    }

    // stacked rows, then exact duplicate and empty row removal
    let mut all_rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(total);
    for block in &blocks {
        for r in 0..block.matrix.nrows() {
            let (cols, vals) = block.matrix.row(r);
            all_rows.push(cols.iter().copied().zip(vals.iter().copied()).filter(|(_, v)| *v != 0.0).collect());
        }
    }
    let mut seen: HashMap<Vec<(usize, u64)>, usize> = HashMap::new();
    let mut kept = Vec::new();
    let mut duplicates = Vec::new();
    for (i, row) in all_rows.iter().enumerate() {
        if is_dropped[i] || row.is_empty() {
            continue;
        }
        let key: Vec<(usize, u64)> = row.iter().map(|&(c, v)| (c, v.to_bits())).collect();
        match seen.get(&key) {
            Some(&first) => duplicates.push((i, first)),
            None => {
                seen.insert(key, i);
                kept.push(i);
            }
        }
    }
    let c = CsrMatrix::from_rows(n, kept.iter().map(|&i| all_rows[i].clone()).collect());
    Ok(SaddleSystem {
        m,
        blocks,
        block_offsets,
        kept,
        duplicates,
        c,
        gauge,
    })
}

impl SaddleSystem {
    pub fn primal_dim(&self) -> usize {
        self.m.nrows()
    }

    /// Number of stacked constraint rows before elimination.
    pub fn constraint_rows(&self) -> usize {
        *self.block_offsets.last().unwrap()
    }

    /// Rows that survive redundancy elimination.
    pub fn kept_rows(&self) -> usize {
        self.kept.len()
    }

    fn block_of(&self, stacked_row: usize) -> (&str, usize) {
        let b = self.block_offsets.partition_point(|&o| o <= stacked_row) - 1;
        (&self.blocks[b].name, stacked_row - self.block_offsets[b])
    }

    /// Factorizes the reduced KKT matrix.
    pub fn factorize(&self, opts: SolveOptions) -> Result<SaddleFactor<'_>> {
        SaddleFactor::new(self, opts)
    }

    /// Factorizes and solves for one right-hand side.
    ///
    /// `r` is indexed by the stacked rows of all blocks.
    pub fn solve(&self, g: &[f64], r: &[f64], opts: SolveOptions) -> Result<SaddleSolution> {
        self.factorize(opts)?.solve(g, r)
    }
}

/// Factorized reduced KKT system, reusable for many right-hand sides.
pub struct SaddleFactor<'a> {
    system: &'a SaddleSystem,
    opts: SolveOptions,
    /// `1 / sqrt(M_ii)`.
    primal_scale: Vec<f64>,
    /// Row scaling of the constraints after primal scaling.
    dual_scale: Vec<f64>,
    /// `order[k]` is the unknown (primal `i < n`, dual `n + j`) at position `k`.
    order: Vec<usize>,
    position: Vec<usize>,
    symbolic: SymbolicCholesky<usize>,
    values: Vec<f64>,
    k_norm: f64,
    factor_seconds: f64,
}

fn faer_error(e: impl std::fmt::Debug) -> Error {
    Error::Solver {
        detail: format!("sparse factorization backend: {e:?}"),
        relative_residual: f64::NAN,
    }
}

impl<'a> SaddleFactor<'a> {
    fn new(system: &'a SaddleSystem, opts: SolveOptions) -> Result<Self> {
        let start = Instant::now();
        let n = system.m.nrows();
        let m = system.kept.len();
        let mdiag = system.m.diagonal();
        if let Some((i, d)) = mdiag.iter().enumerate().find(|(_, d)| !(**d > 0.0)) {
            return Err(Error::Rank {
                block: "flux".into(),
                detail: format!("diagonal entry {i} of the SPD block is {d}"),
            });
        }
        let primal_scale: Vec<f64> = mdiag.iter().map(|d| 1.0 / d.sqrt()).collect();
        let dual_scale: Vec<f64> = (0..m)
            .map(|j| {
                let (cols, vals) = system.c.row(j);
                let s: f64 = cols.iter().zip(vals).map(|(&c, v)| (v * primal_scale[c]).powi(2)).sum();
                1.0 / s.sqrt()
            })
            .collect();

        // fill-reducing order of the primal graph of M + C^T C
        let ct = system.c.transpose();
        let pattern = system.m.add(1.0, &ct.matmul(&system.c), 1.0);
        let amd_perm = if n == 0 {
            Vec::new()
        } else {
            let col_ptr = pattern.indptr().to_vec();
            let row_idx = pattern.indices().to_vec();
            let sym = SymbolicSparseColMatRef::new_checked(n, n, &col_ptr, None, &row_idx);
            let mut perm = vec![0usize; n];
            let mut perm_inv = vec![0usize; n];
            let mut mem = MemBuffer::new(amd::order_scratch::<usize>(n, row_idx.len()));
            amd::order(&mut perm, &mut perm_inv, sym, amd::Control::default(), MemStack::new(&mut mem))
                .map_err(faer_error)?;
            perm
        };
        let mut primal_pos = vec![0usize; n];
        for (k, &i) in amd_perm.iter().enumerate() {
            primal_pos[i] = k;
        }
        // each constraint row right after its last primal neighbour
        let mut after: Vec<Vec<usize>> = vec![Vec::new(); n];
        for j in 0..m {
            let (cols, _) = system.c.row(j);
            let last = cols.iter().map(|&c| primal_pos[c]).max().expect("empty rows were removed");
            after[last].push(j);
        }
        let mut order = Vec::with_capacity(n + m);
        for (k, &i) in amd_perm.iter().enumerate() {
            order.push(i);
            order.extend(after[k].iter().map(|&j| n + j));
        }
        let mut position = vec![0usize; n + m];
        for (k, &u) in order.iter().enumerate() {
            position[u] = k;
        }

        // upper triangle of the permuted, scaled KKT matrix, stored column-wise
        let mut trip = Vec::with_capacity(system.m.nnz() / 2 + n + system.c.nnz());
        for (i, c, v) in system.m.triplets() {
            let (pi, pc) = (position[i], position[c]);
            if pi <= pc {
                trip.push((pc, pi, v * primal_scale[i] * primal_scale[c]));
            }
        }
        for (j, c, v) in system.c.triplets() {
            let (pj, pc) = (position[n + j], position[c]);
            let val = v * primal_scale[c] * dual_scale[j];
            debug_assert!(pc < pj);
            trip.push((pj, pc, val));
        }
        let upper_csc = CsrMatrix::from_triplets(n + m, n + m, &trip);
        let k_norm = kkt_norm_inf(system);

        let dim = n + m;
        let col_ptr = upper_csc.indptr().to_vec();
        let row_idx = upper_csc.indices().to_vec();
        let sym = SymbolicSparseColMatRef::new_checked(dim, dim, &col_ptr, None, &row_idx);
        let symbolic = factorize_symbolic_cholesky(
            sym,
            Side::Upper,
            SymmetricOrdering::Identity,
            CholeskySymbolicParams::default(),
        )
        .map_err(faer_error)?;
        let mut values = vec![0.0; symbolic.len_val()];
        let a = SparseColMatRef::new(sym, upper_csc.data());
        let req = StackReq::any_of(&[
            symbolic.factorize_numeric_ldlt_scratch::<f64>(Par::Seq, Default::default()),
            symbolic.solve_in_place_scratch::<f64>(1, Par::Seq),
        ]);
        let mut mem = MemBuffer::new(req);
        let result = symbolic.factorize_numeric_ldlt(
            &mut values,
            a,
            Side::Upper,
            LdltRegularization::default(),
            Par::Seq,
            MemStack::new(&mut mem),
            Default::default(),
        )
        .map(|_| ());
        let mut this = Self {
            system,
            opts,
            primal_scale,
            dual_scale,
            order,
            position,
            symbolic,
            values: Vec::new(),
            k_norm,
            factor_seconds: 0.0,
        };
        match result {
            Ok(_) => {}
            Err(LdltError::ZeroPivot { index }) => {
                // the backend reports 1-based positions
                return Err(this.rank_error(index.saturating_sub(1).min(dim - 1), 0.0));
            }
        }
        this.values = values;
        this.check_pivots()?;
        this.factor_seconds = start.elapsed().as_secs_f64();
        Ok(this)
    }

    fn rank_error(&self, position: usize, pivot: f64) -> Error {
        let n = self.system.m.nrows();
        let u = self.order[position];
        if u < n {
            Error::Rank {
                block: "flux".into(),
                detail: format!("pivot {pivot:e} at primal unknown {u}"),
            }
        } else {
            let stacked = self.system.kept[u - n];
            let (name, row) = self.system.block_of(stacked);
            Error::Rank {
                block: name.to_string(),
                detail: format!("constraint row {row} depends on earlier rows (pivot {pivot:e})"),
            }
        }
    }

    fn pivots(&self) -> Vec<f64> {
        match self.symbolic.raw() {
            SymbolicCholeskyRaw::Simplicial(s) => {
                let col_ptr = s.col_ptr();
                let row_idx = s.row_idx();
                (0..s.nrows())
                    .map(|j| {
                        let k = col_ptr[j];
                        debug_assert_eq!(row_idx[k], j);
                        self.values[k]
                    })
                    .collect()
            }
            SymbolicCholeskyRaw::Supernodal(s) => {
                let l = SupernodalLdltRef::new(s, &self.values);
                let mut d = Vec::with_capacity(s.nrows());
                for sn in 0..s.n_supernodes() {
                    let node = l.supernode(sn);
                    let val = node.val();
                    let width = val.ncols();
                    for k in 0..width {
                        d.push(val[(k, k)]);
                    }
                }
                d
            }
        }
    }

    fn check_pivots(&self) -> Result<()> {
        let n = self.system.m.nrows();
        for (k, d) in self.pivots().into_iter().enumerate() {
            let sign = if self.order[k] < n { 1.0 } else { -1.0 };
            if !(sign * d > self.opts.pivot_tol) {
                return Err(self.rank_error(k, d));
            }
        }
        Ok(())
    }

    /// Number of stored factor entries.
    pub fn factor_nnz(&self) -> usize {
        self.values.len()
    }

    /// Solves in the scaled, permuted coordinates: `K x = b` with `b`, `x` in
    /// unscaled original numbering.
    fn apply_inverse(&self, bp: &[f64], bd: &[f64], stack: &mut MemStack) -> (Vec<f64>, Vec<f64>) {
        let n = self.primal_scale.len();
        let m = self.dual_scale.len();
        let mut rhs = vec![0.0; n + m];
        for i in 0..n {
            rhs[self.position[i]] = bp[i] * self.primal_scale[i];
        }
        for j in 0..m {
            rhs[self.position[n + j]] = bd[j] * self.dual_scale[j];
        }
        let ldlt = LdltRef::new(&self.symbolic, &self.values);
        let dim = n + m;
        ldlt.solve_in_place_with_conj(Conj::No, MatMut::from_column_major_slice_mut(&mut rhs, dim, 1), Par::Seq, stack);
        let xp = (0..n).map(|i| rhs[self.position[i]] * self.primal_scale[i]).collect();
        let xd = (0..m).map(|j| rhs[self.position[n + j]] * self.dual_scale[j]).collect();
        (xp, xd)
    }

    /// Solves for one right-hand side; `r` is indexed by stacked constraint rows.
    pub fn solve(&self, g: &[f64], r: &[f64]) -> Result<SaddleSolution> {
        let start = Instant::now();
        let sys = self.system;
        let n = sys.m.nrows();
        if g.len() != n || r.len() != sys.constraint_rows() {
            return Err(Error::Dimension(format!(
                "right-hand side has {}+{} entries, system needs {}+{}",
                g.len(),
                r.len(),
                n,
                sys.constraint_rows()
            )));
        }
        for &(dup, first) in &sys.duplicates {
            if r[dup] != r[first] {
                let (name, row) = sys.block_of(dup);
                return Err(Error::Rank {
                    block: name.to_string(),
                    detail: format!("row {row} repeats an earlier row with a different right-hand side"),
                });
            }
        }
        let rk: Vec<f64> = sys.kept.iter().map(|&i| r[i]).collect();
        let b_norm = norm_inf(g).max(norm_inf(&rk));

        let req = self.symbolic.solve_in_place_scratch::<f64>(1, Par::Seq);
        let mut mem = MemBuffer::new(req);
        let stack = MemStack::new(&mut mem);
        let (mut u, mut l) = self.apply_inverse(g, &rk, stack);
        let mut steps = 0;
        let mut rel;
        loop {
            let (rp, rd) = kkt_residual(sys, &u, &l, g, &rk);
            let x_norm = norm_inf(&u).max(norm_inf(&l));
            let denom = self.k_norm * x_norm + b_norm;
            let res = norm_inf(&rp).max(norm_inf(&rd));
            rel = if denom > 0.0 { res / denom } else { 0.0 };
            if rel <= f64::EPSILON * 4.0 || steps >= self.opts.max_refinement {
                break;
            }
            let (du, dl) = self.apply_inverse(&rp, &rd, stack);
            u.iter_mut().zip(&du).for_each(|(a, b)| *a += b);
            l.iter_mut().zip(&dl).for_each(|(a, b)| *a += b);
            steps += 1;
        }

        let mut multipliers = vec![0.0; sys.constraint_rows()];
        for (k, &i) in sys.kept.iter().enumerate() {
            multipliers[i] = l[k];
        }
        if let Some((b, w)) = &sys.gauge {
            let off = sys.block_offsets[*b];
            let rows = w.len();
            let wsum: f64 = w.iter().sum();
            let shift = -w.iter().zip(&multipliers[off..off + rows]).map(|(a, b)| a * b).sum::<f64>() / wsum;
            multipliers[off..off + rows].iter_mut().for_each(|v| *v += shift);
        }

        let report = SolveReport {
            relative_residual: rel,
            refinement_steps: steps,
            primal_dim: n,
            constraint_rows: sys.constraint_rows(),
            dropped_rows: sys.constraint_rows() - sys.kept.len(),
            factor_nnz: self.values.len(),
            factor_seconds: self.factor_seconds,
            solve_seconds: start.elapsed().as_secs_f64(),
        };
        if !(rel <= self.opts.tol) {
            return Err(Error::Solver {
                detail: format!("residual target {:e} not reached after {steps} refinement steps", self.opts.tol),
                relative_residual: rel,
            });
        }
        Ok(SaddleSolution {
            primal: u,
            multipliers,
            report,
        })
    }
}

fn kkt_norm_inf(sys: &SaddleSystem) -> f64 {
    let n = sys.m.nrows();
    let mut rows = vec![0.0; n];
    for (i, _, v) in sys.m.triplets() {
        rows[i] += v.abs();
    }
    for (_, c, v) in sys.c.triplets() {
        rows[c] += v.abs();
    }
    let primal = rows.iter().copied().fold(0.0, f64::max);
    primal.max(sys.c.norm_inf())
}

/// `(g - M u - C^T l, r - C u)` for the reduced system.
fn kkt_residual(sys: &SaddleSystem, u: &[f64], l: &[f64], g: &[f64], r: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mu = sys.m.matvec(u);
    let ctl = sys.c.matvec_transpose(l);
    let rp = (0..u.len()).map(|i| g[i] - mu[i] - ctl[i]).collect();
    let cu = sys.c.matvec(u);
    let rd = (0..r.len()).map(|j| r[j] - cu[j]).collect();
    (rp, rd)
}
