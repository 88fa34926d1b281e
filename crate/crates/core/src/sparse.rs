//! Sparse matrix helpers and a banded LU factorization.
//!
//! Matrices are stored as [`CsrMatrix`]. Direct solves go through
//! [`BandLu`], which reorders the unknowns with reverse Cuthill-McKee and
//! factors the resulting band with row partial pivoting. Transposed solves
//! reuse the same factors, so one factorization serves both the forward and
//! the adjoint recursion.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::{CooMatrix, CsrMatrix};

use crate::error::{OedError, Result};

/// Accumulates `(row, col, value)` entries; duplicates are summed on build.
#[derive(Debug, Clone)]
pub struct TripletBuilder {
    nrows: usize,
    ncols: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl TripletBuilder {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            rows: Vec::new(),
            cols: Vec::new(),
            vals: Vec::new(),
        }
    }

    pub fn with_capacity(nrows: usize, ncols: usize, cap: usize) -> Self {
        Self {
            nrows,
            ncols,
            rows: Vec::with_capacity(cap),
            cols: Vec::with_capacity(cap),
            vals: Vec::with_capacity(cap),
        }
    }

    #[inline]
    pub fn push(&mut self, i: usize, j: usize, v: f64) {
        self.rows.push(i);
        self.cols.push(j);
        self.vals.push(v);
    }

    pub fn build(self) -> CsrMatrix<f64> {
        let coo = CooMatrix::try_from_triplets(self.nrows, self.ncols, self.rows, self.cols, self.vals)
            .expect("triplet indices are within bounds by construction");
        CsrMatrix::from(&coo)
    }
}

/// `alpha * a + beta * b` for matrices of equal shape.
pub fn linear_combination(alpha: f64, a: &CsrMatrix<f64>, beta: f64, b: &CsrMatrix<f64>) -> CsrMatrix<f64> {
    assert_eq!(a.nrows(), b.nrows());
    assert_eq!(a.ncols(), b.ncols());
    let mut t = TripletBuilder::with_capacity(a.nrows(), a.ncols(), a.nnz() + b.nnz());
    for (i, j, v) in a.triplet_iter() {
        t.push(i, j, alpha * v);
    }
    for (i, j, v) in b.triplet_iter() {
        t.push(i, j, beta * v);
    }
    t.build()
}

/// `y = A x`.
pub fn spmv(a: &CsrMatrix<f64>, x: &DVector<f64>) -> DVector<f64> {
    let mut y = DVector::zeros(a.nrows());
    spmv_into(a, x.as_slice(), y.as_mut_slice());
    y
}

pub fn spmv_into(a: &CsrMatrix<f64>, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), a.ncols());
    debug_assert_eq!(y.len(), a.nrows());
    for (yi, row) in y.iter_mut().zip(a.row_iter()) {
        *yi = row
            .col_indices()
            .iter()
            .zip(row.values())
            .map(|(&j, &v)| v * x[j])
            .sum();
    }
}

/// `y = Aᵀ x`.
pub fn spmv_transpose(a: &CsrMatrix<f64>, x: &DVector<f64>) -> DVector<f64> {
    let mut y = DVector::zeros(a.ncols());
    for (i, row) in a.row_iter().enumerate() {
        let xi = x[i];
        if xi == 0.0 {
            continue;
        }
        for (&j, &v) in row.col_indices().iter().zip(row.values()) {
            y[j] += v * xi;
        }
    }
    y
}

/// `xᵀ A y`.
pub fn bilinear(a: &CsrMatrix<f64>, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    a.row_iter()
        .enumerate()
        .map(|(i, row)| {
            let s: f64 = row
                .col_indices()
                .iter()
                .zip(row.values())
                .map(|(&j, &v)| v * y[j])
                .sum();
            x[i] * s
        })
        .sum()
}

/// `A X` for a dense block of columns.
pub fn spmm(a: &CsrMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), x.ncols());
    for c in 0..x.ncols() {
        let col = x.column(c);
        let mut oc = out.column_mut(c);
        for (i, row) in a.row_iter().enumerate() {
            oc[i] = row
                .col_indices()
                .iter()
                .zip(row.values())
                .map(|(&j, &v)| v * col[j])
                .sum();
        }
    }
    out
}

pub fn to_dense(a: &CsrMatrix<f64>) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(a.nrows(), a.ncols());
    for (i, j, v) in a.triplet_iter() {
        d[(i, j)] += *v;
    }
    d
}

pub fn row_sums(a: &CsrMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(a.nrows(), a.row_iter().map(|r| r.values().iter().sum()))
}

/// Largest absolute asymmetry `max |a_ij - a_ji|`.
pub fn asymmetry(a: &CsrMatrix<f64>) -> f64 {
    let t = a.transpose();
    linear_combination(1.0, a, -1.0, &t)
        .values()
        .iter()
        .fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Reverse Cuthill-McKee ordering of the (symmetrized) sparsity graph.
/// Returns `perm` with `perm[new] = old`.
pub fn reverse_cuthill_mckee(a: &CsrMatrix<f64>) -> Vec<usize> {
    let n = a.nrows();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, j, _) in a.triplet_iter() {
        if i != j {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();

    let bfs_levels = |start: usize, seen: &[bool]| -> (usize, usize) {
        // returns (last node reached, eccentricity)
        let mut depth = vec![usize::MAX; n];
        let mut queue = VecDeque::from([start]);
        depth[start] = 0;
        let mut last = start;
        while let Some(u) = queue.pop_front() {
            last = u;
            for &v in &adj[u] {
                if !seen[v] && depth[v] == usize::MAX {
                    depth[v] = depth[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        (last, depth[last])
    };

    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        let seed = (0..n)
            .filter(|&i| !visited[i])
            .min_by_key(|&i| degree[i])
            .expect("an unvisited node remains");
        // pseudo-peripheral start node
        let mut start = seed;
        let (mut far, mut ecc) = bfs_levels(start, &visited);
        for _ in 0..4 {
            let (far2, ecc2) = bfs_levels(far, &visited);
            if ecc2 <= ecc {
                break;
            }
            start = far;
            far = far2;
            ecc = ecc2;
        }
        let mut queue = VecDeque::from([start]);
        visited[start] = true;
        while let Some(u) = queue.pop_front() {
            order.push(u);
            let mut nbrs: Vec<usize> = adj[u].iter().copied().filter(|&v| !visited[v]).collect();
            nbrs.sort_by_key(|&v| degree[v]);
            for v in nbrs {
                visited[v] = true;
                queue.push_back(v);
            }
        }
    }
    order.reverse();
    order
}

/// LU factorization `P Â = L U` of a reordered band matrix `Â = Π A Πᵀ`.
#[derive(Debug, Clone)]
pub struct BandLu {
    n: usize,
    /// `perm[new] = old`
    perm: Vec<usize>,
    kl: usize,
    /// stored row width: `2 kl + ku + 1`
    width: usize,
    /// upper bandwidth of U after pivoting: `kl + ku`
    ku_fill: usize,
    band: Vec<f64>,
    lower: Vec<f64>,
    pivots: Vec<usize>,
}

impl BandLu {
    pub fn factor(a: &CsrMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(OedError::Factorization(format!(
                "matrix is {}x{}, not square",
                a.nrows(),
                a.ncols()
            )));
        }
        let n = a.nrows();
        let perm = reverse_cuthill_mckee(a);
        let mut inv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let (mut kl, mut ku) = (0usize, 0usize);
        for (i, j, _) in a.triplet_iter() {
            let (pi, pj) = (inv[i], inv[j]);
            if pi > pj {
                kl = kl.max(pi - pj);
            } else {
                ku = ku.max(pj - pi);
            }
        }
        let width = 2 * kl + ku + 1;
        let ku_fill = kl + ku;
        let mut band = vec![0.0; n * width];
        let mut scale = 0.0_f64;
        for (i, j, v) in a.triplet_iter() {
            let (pi, pj) = (inv[i], inv[j]);
            band[pi * width + (pj + kl - pi)] += *v;
            scale = scale.max(v.abs());
        }
        if !scale.is_finite() {
            return Err(OedError::Factorization("matrix has non-finite entries".into()));
        }
        let mut lower = vec![0.0; n * kl.max(1)];
        let mut pivots = vec![0usize; n];
        let idx = |i: usize, j: usize| i * width + (j + kl - i);
        let tiny = scale * f64::EPSILON * 1e-3;

        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let last_col = (k + ku_fill).min(n - 1);
            let mut p = k;
            let mut best = band[idx(k, k)].abs();
            for i in (k + 1)..=last_row {
                let v = band[idx(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best <= tiny || scale == 0.0 {
                return Err(OedError::Factorization(format!("zero pivot in column {k}")));
            }
            pivots[k] = p;
            if p != k {
                for j in k..=last_col {
                    band.swap(idx(k, j), idx(p, j));
                }
            }
            let pivot = band[idx(k, k)];
            for i in (k + 1)..=last_row {
                let m = band[idx(i, k)] / pivot;
                lower[k * kl.max(1) + (i - k - 1)] = m;
                if m != 0.0 {
                    for j in (k + 1)..=last_col {
                        let u = band[idx(k, j)];
                        band[idx(i, j)] -= m * u;
                    }
                }
            }
        }
        Ok(Self {
            n,
            perm,
            kl,
            width,
            ku_fill,
            band,
            lower,
            pivots,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Lower and upper bandwidth after reordering.
    pub fn bandwidth(&self) -> (usize, usize) {
        (self.kl, self.ku_fill - self.kl)
    }

    #[inline]
    fn u(&self, i: usize, j: usize) -> f64 {
        self.band[i * self.width + (j + self.kl - i)]
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_in_place(x.as_mut_slice());
        x
    }

    pub fn solve_transpose(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_transpose_in_place(x.as_mut_slice());
        x
    }

    /// Solves `A x = b`, overwriting `b` with `x`.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        let kl = self.kl;
        let lw = kl.max(1);
        let mut y: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        for k in 0..n {
            let p = self.pivots[k];
            if p != k {
                y.swap(k, p);
            }
            let yk = y[k];
            if yk != 0.0 {
                let last = (k + kl).min(n - 1);
                for i in (k + 1)..=last {
                    y[i] -= self.lower[k * lw + (i - k - 1)] * yk;
                }
            }
        }
        for i in (0..n).rev() {
            let last = (i + self.ku_fill).min(n - 1);
            let mut s = y[i];
            for j in (i + 1)..=last {
                s -= self.u(i, j) * y[j];
            }
            y[i] = s / self.u(i, i);
        }
        for (new, &old) in self.perm.iter().enumerate() {
            b[old] = y[new];
        }
    }

    /// Solves `Aᵀ x = b`, overwriting `b` with `x`.
    pub fn solve_transpose_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        let kl = self.kl;
        let lw = kl.max(1);
        let mut y: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        // Uᵀ y = b
        for i in 0..n {
            let yi = y[i] / self.u(i, i);
            y[i] = yi;
            if yi != 0.0 {
                let last = (i + self.ku_fill).min(n - 1);
                for j in (i + 1)..=last {
                    y[j] -= self.u(i, j) * yi;
                }
            }
        }
        // apply L_k⁻ᵀ then P_k, from the last transform back to the first
        for k in (0..n).rev() {
            let last = (k + kl).min(n - 1);
            let mut s = 0.0;
            for i in (k + 1)..=last {
                s += self.lower[k * lw + (i - k - 1)] * y[i];
            }
            y[k] -= s;
            let p = self.pivots[k];
            if p != k {
                y.swap(k, p);
            }
        }
        for (new, &old) in self.perm.iter().enumerate() {
            b[old] = y[new];
        }
    }
}
