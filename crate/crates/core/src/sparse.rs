//! Compressed sparse row matrices and a sparse direct solver.
//!
//! The LU factorisation is a left-looking Gilbert–Peierls elimination with
//! threshold partial pivoting (the same scheme as CSparse's `cs_lu`). Callers
//! supply the column order; for absorbing-chain systems ordering unknowns by
//! increasing desirability makes the matrix nearly triangular and keeps fill
//! small.

use crate::{Error, Result};

/// Row-major compressed sparse matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from `(row, col, value)` triplets. Duplicate entries
    /// are summed and explicit zeros are dropped.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; nrows + 1];
        for &(r, c, _) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) out of bounds");
            counts[r + 1] += 1;
        }
        for i in 0..nrows {
            counts[i + 1] += counts[i];
        }
        let mut next = counts.clone();
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![0f64; triplets.len()];
        for &(r, c, v) in triplets {
            cols[next[r]] = c;
            vals[next[r]] = v;
            next[r] += 1;
        }

        let mut indptr = Vec::with_capacity(nrows + 1);
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        indptr.push(0);
        let mut row: Vec<(usize, f64)> = Vec::new();
        for r in 0..nrows {
            row.clear();
            row.extend((counts[r]..counts[r + 1]).map(|k| (cols[k], vals[k])));
            row.sort_by_key(|&(c, _)| c);
            let mut k = 0;
            while k < row.len() {
                let c = row[k].0;
                let mut v = 0.0;
                while k < row.len() && row[k].0 == c {
                    v += row[k].1;
                    k += 1;
                }
                if v != 0.0 {
                    indices.push(c);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        CsrMatrix {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        CsrMatrix {
            nrows: n,
            ncols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Nonzeros of row `i` as `(column, value)` pairs in column order.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[i]..self.indptr[i + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn row_nnz(&self, i: usize) -> usize {
        self.indptr[i + 1] - self.indptr[i]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i)
            .find(|&(c, _)| c == j)
            .map(|(_, v)| v)
            .unwrap_or(0.0)
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows)
            .map(|i| self.row(i).map(|(j, v)| v * x[j]).sum())
            .collect()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.nrows).map(|i| self.row(i).map(|(_, v)| v).sum()).collect()
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        (0..self.nrows)
            .flat_map(|i| self.row(i).map(move |(j, v)| (i, j, v)))
            .collect()
    }

    pub fn transpose(&self) -> CsrMatrix {
        let t: Vec<_> = self.triplets().into_iter().map(|(i, j, v)| (j, i, v)).collect();
        CsrMatrix::from_triplets(self.ncols, self.nrows, &t)
    }

    /// Sparse product `self * rhs`.
    pub fn matmul(&self, rhs: &CsrMatrix) -> CsrMatrix {
        assert_eq!(self.ncols, rhs.nrows);
        let mut triplets = Vec::new();
        let mut acc = vec![0.0; rhs.ncols];
        let mut touched: Vec<usize> = Vec::new();
        let mut seen = vec![false; rhs.ncols];
        for i in 0..self.nrows {
            for (k, a) in self.row(i) {
                for (j, b) in rhs.row(k) {
                    if !seen[j] {
                        seen[j] = true;
                        touched.push(j);
                    }
                    acc[j] += a * b;
                }
            }
            for &j in &touched {
                triplets.push((i, j, acc[j]));
                acc[j] = 0.0;
                seen[j] = false;
            }
            touched.clear();
        }
        CsrMatrix::from_triplets(self.nrows, rhs.ncols, &triplets)
    }

    /// Principal submatrix on the listed indices (in the given order).
    pub fn principal_submatrix(&self, keep: &[usize]) -> CsrMatrix {
        let mut local = vec![usize::MAX; self.ncols.max(self.nrows)];
        for (k, &i) in keep.iter().enumerate() {
            local[i] = k;
        }
        let mut triplets = Vec::new();
        for (k, &i) in keep.iter().enumerate() {
            for (j, v) in self.row(i) {
                if local[j] != usize::MAX {
                    triplets.push((k, local[j], v));
                }
            }
        }
        CsrMatrix::from_triplets(keep.len(), keep.len(), &triplets)
    }
}

/// Column-compressed storage used internally by the LU factorisation.
struct Csc {
    n: usize,
    colptr: Vec<usize>,
    rows: Vec<usize>,
    vals: Vec<f64>,
}

impl Csc {
    fn from_csr(a: &CsrMatrix) -> Csc {
        let t = a.transpose();
        Csc {
            n: a.ncols,
            colptr: t.indptr,
            rows: t.indices,
            vals: t.values,
        }
    }
}

/// Sparse LU factors `P A Q = L U` of a square matrix.
#[derive(Debug, Clone)]
pub struct SparseLu {
    n: usize,
    // L is unit lower triangular, diagonal stored first in each column.
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    // U is upper triangular, diagonal stored last in each column.
    up: Vec<usize>,
    ui: Vec<usize>,
    ux: Vec<f64>,
    pinv: Vec<usize>,
    q: Vec<usize>,
}

impl SparseLu {
    /// Factorises `a` processing columns in `order`. `pivot_tol` in `(0, 1]`
    /// is the fraction of the largest candidate a diagonal pivot must reach
    /// to be kept.
    pub fn factor(a: &CsrMatrix, order: &[usize], pivot_tol: f64) -> Result<SparseLu> {
        if a.nrows != a.ncols {
            return Err(Error::LinearSolve("matrix is not square".into()));
        }
        let n = a.nrows;
        assert_eq!(order.len(), n);
        let csc = Csc::from_csr(a);

        let mut lp = Vec::with_capacity(n + 1);
        let mut li = Vec::with_capacity(2 * csc.rows.len() + n);
        let mut lx = Vec::with_capacity(2 * csc.rows.len() + n);
        let mut up = Vec::with_capacity(n + 1);
        let mut ui = Vec::with_capacity(2 * csc.rows.len() + n);
        let mut ux = Vec::with_capacity(2 * csc.rows.len() + n);
        let mut pinv = vec![usize::MAX; n];
        let mut x = vec![0.0; n];
        let mut xi = vec![0usize; n];
        let mut stack = vec![0usize; n];
        let mut pstack = vec![0usize; n];
        let mut marked = vec![false; n];

        for k in 0..n {
            lp.push(li.len());
            up.push(ui.len());
            let col = order[k];

            // Sparse triangular solve x = L \ A(:, col).
            let top = reach(
                &lp, &li, &csc, col, &pinv, &mut xi, &mut stack, &mut pstack, &mut marked,
            );
            for &i in &xi[top..n] {
                x[i] = 0.0;
            }
            for p in csc.colptr[col]..csc.colptr[col + 1] {
                x[csc.rows[p]] = csc.vals[p];
            }
            for px in top..n {
                let j = xi[px];
                let jj = pinv[j];
                if jj == usize::MAX {
                    continue;
                }
                // Column jj of L: first entry is the unit diagonal.
                let xj = x[j];
                let end = if jj + 1 < lp.len() { lp[jj + 1] } else { li.len() };
                for p in lp[jj] + 1..end {
                    x[li[p]] -= lx[p] * xj;
                }
            }

            // Pivot selection.
            let mut ipiv = usize::MAX;
            let mut best = -1.0;
            for &i in &xi[top..n] {
                if pinv[i] == usize::MAX {
                    let t = x[i].abs();
                    if t > best {
                        best = t;
                        ipiv = i;
                    }
                } else {
                    ui.push(pinv[i]);
                    ux.push(x[i]);
                }
            }
            if ipiv == usize::MAX || best <= 0.0 {
                return Err(Error::LinearSolve(format!(
                    "matrix is structurally or numerically singular at column {col}"
                )));
            }
            if pinv[col] == usize::MAX && x[col].abs() >= best * pivot_tol {
                ipiv = col;
            }
            let pivot = x[ipiv];
            ui.push(k);
            ux.push(pivot);
            pinv[ipiv] = k;
            li.push(ipiv);
            lx.push(1.0);
            for &i in &xi[top..n] {
                if pinv[i] == usize::MAX {
                    li.push(i);
                    lx.push(x[i] / pivot);
                }
                x[i] = 0.0;
            }
        }
        lp.push(li.len());
        up.push(ui.len());
        for r in li.iter_mut() {
            *r = pinv[*r];
        }
        Ok(SparseLu {
            n,
            lp,
            li,
            lx,
            up,
            ui,
            ux,
            pinv,
            q: order.to_vec(),
        })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = vec![0.0; n];
        for i in 0..n {
            x[self.pinv[i]] = b[i];
        }
        for j in 0..n {
            let xj = x[j];
            for p in self.lp[j] + 1..self.lp[j + 1] {
                x[self.li[p]] -= self.lx[p] * xj;
            }
        }
        for j in (0..n).rev() {
            let last = self.up[j + 1] - 1;
            x[j] /= self.ux[last];
            let xj = x[j];
            for p in self.up[j]..last {
                x[self.ui[p]] -= self.ux[p] * xj;
            }
        }
        let mut out = vec![0.0; n];
        for k in 0..n {
            out[self.q[k]] = x[k];
        }
        out
    }

    /// Stored nonzeros in `L` and `U` together.
    pub fn fill(&self) -> usize {
        self.li.len() + self.ui.len()
    }
}

/// Nonzero pattern of `L \ A(:, col)` in topological order, written to
/// `xi[top..n]`.
#[allow(clippy::too_many_arguments)]
fn reach(
    lp: &[usize],
    li: &[usize],
    a: &Csc,
    col: usize,
    pinv: &[usize],
    xi: &mut [usize],
    stack: &mut [usize],
    pstack: &mut [usize],
    marked: &mut [bool],
) -> usize {
    let n = a.n;
    let mut top = n;
    for p in a.colptr[col]..a.colptr[col + 1] {
        let start = a.rows[p];
        if marked[start] {
            continue;
        }
        // Iterative depth-first search from `start` over the graph of L.
        let mut head = 0usize;
        stack[0] = start;
        let mut fresh = true;
        loop {
            let j = stack[head];
            let jj = pinv[j];
            if fresh && !marked[j] {
                marked[j] = true;
                pstack[head] = if jj == usize::MAX { 0 } else { lp[jj] + 1 };
            }
            let end = if jj == usize::MAX {
                0
            } else if jj + 1 < lp.len() {
                lp[jj + 1]
            } else {
                li.len()
            };
            let mut descended = false;
            let mut q = pstack[head];
            while q < end {
                let i = li[q];
                q += 1;
                if marked[i] {
                    continue;
                }
                pstack[head] = q;
                head += 1;
                stack[head] = i;
                descended = true;
                break;
            }
            if descended {
                fresh = true;
                continue;
            }
            pstack[head] = q;
            top -= 1;
            xi[top] = j;
            if head == 0 {
                break;
            }
            head -= 1;
            fresh = false;
        }
    }
    for &i in &xi[top..n] {
        marked[i] = false;
    }
    top
}

/// Gauss–Seidel iteration for `(I - T) x = b` where `T` is substochastic
/// with spectral radius below one. Returns the iterate and the number of
/// sweeps performed.
pub fn gauss_seidel_absorbing(
    t: &CsrMatrix,
    b: &[f64],
    tol: f64,
    max_sweeps: usize,
) -> Result<(Vec<f64>, usize)> {
    let n = t.nrows();
    let mut x = b.to_vec();
    for sweep in 1..=max_sweeps {
        let mut change: f64 = 0.0;
        for i in 0..n {
            let mut diag = 0.0;
            let mut acc = b[i];
            for (j, v) in t.row(i) {
                if j == i {
                    diag += v;
                } else {
                    acc += v * x[j];
                }
            }
            let xi = acc / (1.0 - diag);
            change = change.max((xi - x[i]).abs());
            x[i] = xi;
        }
        if change <= tol {
            return Ok((x, sweep));
        }
    }
    Err(Error::NotConverged {
        iterations: max_sweeps,
        gap: f64::NAN,
    })
}

/// Infinity-norm residual `|(I - T) x - b|`.
pub fn absorbing_residual(t: &CsrMatrix, x: &[f64], b: &[f64]) -> f64 {
    let tx = t.matvec(x);
    (0..x.len())
        .map(|i| (x[i] - tx[i] - b[i]).abs())
        .fold(0.0, f64::max)
}
