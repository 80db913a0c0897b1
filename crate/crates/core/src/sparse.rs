//! A small compressed-sparse-row matrix with the handful of kernels the
//! assembly and the multiscale method need.

use nalgebra::DMatrix;

/// Real sparse matrix in compressed row form with sorted column indices.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<f64>,
}

impl CsrMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            indptr: vec![0; nrows + 1],
            indices: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            data: vec![1.0; n],
        }
    }

    /// Builds a matrix from `(row, col, value)` triplets; duplicates are summed
    /// in the order given, so the result does not depend on hashing.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; nrows + 1];
        for &(r, c, _) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) outside {nrows}x{ncols}");
            counts[r + 1] += 1;
        }
        for r in 0..nrows {
            counts[r + 1] += counts[r];
        }
        let mut fill = counts.clone();
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![0f64; triplets.len()];
        for &(r, c, v) in triplets {
            cols[fill[r]] = c;
            vals[fill[r]] = v;
            fill[r] += 1;
        }
        let mut indptr = Vec::with_capacity(nrows + 1);
        let mut indices = Vec::with_capacity(triplets.len());
        let mut data = Vec::with_capacity(triplets.len());
        indptr.push(0);
        let mut order: Vec<usize> = Vec::new();
        for r in 0..nrows {
            let (lo, hi) = (counts[r], counts[r + 1]);
            order.clear();
            order.extend(lo..hi);
            // stable: duplicates keep insertion order
            order.sort_by_key(|&k| cols[k]);
            let mut last = usize::MAX;
            for &k in &order {
                if cols[k] == last {
                    *data.last_mut().unwrap() += vals[k];
                } else {
                    indices.push(cols[k]);
                    data.push(vals[k]);
                    last = cols[k];
                }
            }
            indptr.push(indices.len());
        }
        Self {
            nrows,
            ncols,
            indptr,
            indices,
            data,
        }
    }

    /// Builds a matrix row by row from sorted `(col, value)` lists.
    pub fn from_rows(ncols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut data = Vec::new();
        indptr.push(0);
        for row in &rows {
            let mut last = None;
            for &(c, v) in row {
                assert!(c < ncols && last.is_none_or(|l| c > l), "row entries must be sorted and in range");
                last = Some(c);
                indices.push(c);
                data.push(v);
            }
            indptr.push(indices.len());
        }
        Self {
            nrows: rows.len(),
            ncols,
            indptr,
            indices,
            data,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }
    pub fn ncols(&self) -> usize {
        self.ncols
    }
    pub fn nnz(&self) -> usize {
        self.data.len()
    }
    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Column indices and values of row `r`.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (lo, hi) = (self.indptr[r], self.indptr[r + 1]);
        (&self.indices[lo..hi], &self.data[lo..hi])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        cols.binary_search(&c).map_or(0.0, |k| vals[k])
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |r| {
            let (cols, vals) = self.row(r);
            cols.iter().zip(vals).map(move |(&c, &v)| (r, c, v))
        })
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols, "matvec dimension mismatch");
        (0..self.nrows)
            .map(|r| {
                let (cols, vals) = self.row(r);
                cols.iter().zip(vals).map(|(&c, &v)| v * x[c]).sum()
            })
            .collect()
    }

    /// `A^T x` without forming the transpose.
    pub fn matvec_transpose(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows, "matvec dimension mismatch");
        let mut y = vec![0.0; self.ncols];
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                y[c] += v * xr;
            }
        }
        y
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.ncols + 1];
        for &c in &self.indices {
            counts[c + 1] += 1;
        }
        for c in 0..self.ncols {
            counts[c + 1] += counts[c];
        }
        let mut fill = counts.clone();
        let mut indices = vec![0; self.nnz()];
        let mut data = vec![0.0; self.nnz()];
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                indices[fill[c]] = r;
                data[fill[c]] = v;
                fill[c] += 1;
            }
        }
        Self {
            nrows: self.ncols,
            ncols: self.nrows,
            indptr: counts,
            indices,
            data,
        }
    }

    /// Sparse product `self * other` (row-by-row accumulation).
    pub fn matmul(&self, other: &CsrMatrix) -> Self {
        assert_eq!(self.ncols, other.nrows, "matmul dimension mismatch");
        let n = other.ncols;
        let mut acc = vec![0.0; n];
        let mut marker = vec![usize::MAX; n];
        let mut touched = Vec::new();
        let mut indptr = Vec::with_capacity(self.nrows + 1);
        let mut indices = Vec::new();
        let mut data = Vec::new();
        indptr.push(0);
        for r in 0..self.nrows {
            touched.clear();
            let (cols, vals) = self.row(r);
            for (&k, &a) in cols.iter().zip(vals) {
                let (ocols, ovals) = other.row(k);
                for (&c, &b) in ocols.iter().zip(ovals) {
                    if marker[c] != r {
                        marker[c] = r;
                        acc[c] = 0.0;
                        touched.push(c);
                    }
                    acc[c] += a * b;
                }
            }
            touched.sort_unstable();
            for &c in &touched {
                indices.push(c);
                data.push(acc[c]);
            }
            indptr.push(indices.len());
        }
        Self {
            nrows: self.nrows,
            ncols: n,
            indptr,
            indices,
            data,
        }
    }

    /// `alpha * self + beta * other`.
    pub fn add(&self, alpha: f64, other: &CsrMatrix, beta: f64) -> Self {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols), "add dimension mismatch");
        let mut rows = Vec::with_capacity(self.nrows);
        for r in 0..self.nrows {
            let (ac, av) = self.row(r);
            let (bc, bv) = other.row(r);
            let mut row = Vec::with_capacity(ac.len() + bc.len());
            let (mut i, mut j) = (0, 0);
            while i < ac.len() || j < bc.len() {
                if j == bc.len() || (i < ac.len() && ac[i] < bc[j]) {
                    row.push((ac[i], alpha * av[i]));
                    i += 1;
                } else if i == ac.len() || bc[j] < ac[i] {
                    row.push((bc[j], beta * bv[j]));
                    j += 1;
                } else {
                    row.push((ac[i], alpha * av[i] + beta * bv[j]));
                    i += 1;
                    j += 1;
                }
            }
            rows.push(row);
        }
        Self::from_rows(self.ncols, rows)
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    /// Multiplies row `r` by `d[r]`.
    pub fn scale_rows(&mut self, d: &[f64]) {
        for r in 0..self.nrows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                self.data[k] *= d[r];
            }
        }
    }

    /// Rows `rows` (in the given order) and columns selected by `col_map`,
    /// where `col_map[c]` is the new index of column `c` or `usize::MAX` to drop it.
    pub fn submatrix(&self, rows: &[usize], col_map: &[usize], new_ncols: usize) -> Self {
        assert_eq!(col_map.len(), self.ncols);
        let mut out = Vec::with_capacity(rows.len());
        for &r in rows {
            let (cols, vals) = self.row(r);
            let mut row: Vec<(usize, f64)> = cols
                .iter()
                .zip(vals)
                .filter(|(&c, _)| col_map[c] != usize::MAX)
                .map(|(&c, &v)| (col_map[c], v))
                .collect();
            row.sort_by_key(|&(c, _)| c);
            out.push(row);
        }
        Self::from_rows(new_ncols, out)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows.min(self.ncols)).map(|r| self.get(r, r)).collect()
    }

    /// Largest absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.nrows)
            .map(|r| self.row(r).1.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Largest absolute entry of `self - self^T`.
    pub fn asymmetry(&self) -> f64 {
        let t = self.transpose();
        self.add(1.0, &t, -1.0).data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.triplets() {
            m[(r, c)] += v;
        }
        m
    }

    /// Writes one `row col value` line per stored entry.
    pub fn write_coordinate<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        for (r, c, v) in self.triplets() {
            writeln!(w, "{r} {c} {v:e}")?;
        }
        Ok(())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// `y += alpha * x`.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CsrMatrix {
        CsrMatrix::from_triplets(
            3,
            4,
            &[(0, 1, 2.0), (2, 3, -1.0), (0, 1, 1.0), (1, 0, 4.0), (2, 0, 0.5), (0, 3, 1.5)],
        )
    }

    #[test]
    fn triplets_are_summed() {
        let a = sample();
        assert_eq!(a.nnz(), 5);
        assert_eq!(a.get(0, 1), 3.0);
        assert_eq!(a.get(1, 1), 0.0);
        assert_eq!(a.to_dense()[(2, 3)], -1.0);
    }

    #[test]
    fn products_match_dense() {
        let a = sample();
        let b = CsrMatrix::from_triplets(4, 2, &[(0, 0, 1.0), (1, 1, 2.0), (3, 0, -3.0), (3, 1, 1.0)]);
        let dense = a.to_dense() * b.to_dense();
        assert_eq!(a.matmul(&b).to_dense(), dense);
        assert_eq!(a.transpose().to_dense(), a.to_dense().transpose());
        let x = [1.0, -2.0, 0.5, 3.0];
        let y = a.matvec(&x);
        let yd = a.to_dense() * nalgebra::DVector::from_column_slice(&x);
        assert_eq!(y, yd.as_slice());
        let z = [1.0, 2.0, 3.0];
        assert_eq!(a.matvec_transpose(&z), a.transpose().matvec(&z));
    }

    #[test]
    fn add_and_submatrix() {
        let a = sample();
        let d = a.add(2.0, &a, -1.0);
        assert_eq!(d.to_dense(), a.to_dense());
        let s = a.submatrix(&[2, 0], &[0, usize::MAX, usize::MAX, 1], 2);
        assert_eq!(s.to_dense(), DMatrix::from_row_slice(2, 2, &[0.5, -1.0, 0.0, 1.5]));
    }

    #[test]
    fn asymmetry_of_symmetric_matrix_is_zero() {
        let a = sample();
        let s = a.matmul(&a.transpose());
        assert_eq!(s.asymmetry(), 0.0);
    }
}
