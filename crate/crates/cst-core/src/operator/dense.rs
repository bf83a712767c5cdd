//! Desk-scale dense factorizations: Tikhonov-regularized pseudo-inverse,
//! singular triples for truncated-SVD reconstruction, and a power-iteration
//! spectral norm.

use super::{OperatorError, SparseOperator};
use crate::parallel;
use nalgebra::{DMatrix, DVector};

/// Largest side allowed before dense factorization is refused.
pub const DENSE_LIMIT: usize = 16_384;

/// Dense row-major matrix acting as a linear operator.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseOperator {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseOperator {
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>, OperatorError> {
        if v.len() != self.cols {
            return Err(OperatorError::ShapeMismatch { got: v.len(), want: self.cols });
        }
        Ok(parallel::indexed_map(self.rows, |i| {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            row.iter().zip(v).map(|(a, b)| a * b).sum()
        }))
    }

    pub fn apply_transpose(&self, v: &[f64]) -> Result<Vec<f64>, OperatorError> {
        if v.len() != self.rows {
            return Err(OperatorError::ShapeMismatch { got: v.len(), want: self.rows });
        }
        Ok(parallel::indexed_map(self.cols, |j| {
            (0..self.rows).map(|i| self.data[i * self.cols + j] * v[i]).sum()
        }))
    }
}

fn check_dense_scale(a: &SparseOperator) -> Result<(), OperatorError> {
    let side = a.n.max(a.m);
    if side > DENSE_LIMIT {
        return Err(OperatorError::ScaleTooLarge { n: side, limit: DENSE_LIMIT });
    }
    Ok(())
}

// Dot product of two sparse rows with ascending column indices.
fn sparse_dot(c1: &[u32], w1: &[f64], c2: &[u32], w2: &[f64]) -> f64 {
    let (mut i, mut j, mut acc) = (0usize, 0usize, 0.0);
    while i < c1.len() && j < c2.len() {
        match c1[i].cmp(&c2[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                acc += w1[i] * w2[j];
                i += 1;
                j += 1;
            }
        }
    }
    acc
}

// A A^T as a symmetric dense matrix.
fn gram_rows(a: &SparseOperator) -> DMatrix<f64> {
    let m = a.m;
    let upper = parallel::indexed_map(m, |r1| {
        let (c1, w1) = a.row(r1);
        (r1..m)
            .map(|r2| {
                let (c2, w2) = a.row(r2);
                sparse_dot(c1, w1, c2, w2)
            })
            .collect::<Vec<_>>()
    });
    let mut g = DMatrix::zeros(m, m);
    for (r1, seg) in upper.iter().enumerate() {
        for (off, &v) in seg.iter().enumerate() {
            let r2 = r1 + off;
            g[(r1, r2)] = v;
            g[(r2, r1)] = v;
        }
    }
    g
}

// A^T A as a symmetric dense matrix.
fn gram_cols(a: &SparseOperator) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(a.n, a.n);
    for r in 0..a.m {
        let (cols, wgts) = a.row(r);
        for (i, (&ci, &wi)) in cols.iter().zip(wgts).enumerate() {
            for (&cj, &wj) in cols[i..].iter().zip(&wgts[i..]) {
                g[(ci as usize, cj as usize)] += wi * wj;
                if ci != cj {
                    g[(cj as usize, ci as usize)] += wi * wj;
                }
            }
        }
    }
    g
}

// Column-compressed view of A, built deterministically in row order.
fn transpose_index(a: &SparseOperator) -> (Vec<usize>, Vec<u32>, Vec<f64>) {
    let mut counts = vec![0usize; a.n + 1];
    for &c in &a.cols {
        counts[c as usize + 1] += 1;
    }
    for i in 0..a.n {
        counts[i + 1] += counts[i];
    }
    let mut rows = vec![0u32; a.nnz()];
    let mut wgts = vec![0.0f64; a.nnz()];
    let mut cursor = counts.clone();
    for r in 0..a.m {
        let (cols, ws) = a.row(r);
        for (&c, &w) in cols.iter().zip(ws) {
            let slot = cursor[c as usize];
            rows[slot] = r as u32;
            wgts[slot] = w;
            cursor[c as usize] += 1;
        }
    }
    (counts, rows, wgts)
}

/// The Tikhonov pseudo-inverse `(A^T A + tau I)^{-1} A^T`, materialized as a
/// dense `n x m` operator through the eigendecomposition of the smaller Gram
/// matrix (equivalently, the singular value decomposition of `A`).
///
/// `tau = 0` is accepted only when `A^T A` is numerically nonsingular, which
/// requires full column rank.
pub fn pinv_dense(a: &SparseOperator, tau: f64) -> Result<DenseOperator, OperatorError> {
    check_dense_scale(a)?;
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(OperatorError::BadGrid(format!("tau must be finite and non-negative, got {tau}")));
    }
    const SINGULAR_RATIO: f64 = 1e-10;

    if a.m <= a.n {
        // Rank cannot exceed m, so tau = 0 is only meaningful for m = n.
        let eig = gram_rows(a).symmetric_eigen();
        let lam_max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        let lam_min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if tau == 0.0 && (a.m < a.n || lam_max == 0.0 || lam_min <= SINGULAR_RATIO * lam_max) {
            return Err(OperatorError::Singular { ratio: if lam_max > 0.0 { lam_min / lam_max } else { 0.0 } });
        }
        let inv = DVector::from_iterator(
            a.m,
            eig.eigenvalues.iter().map(|&l| 1.0 / (l.max(0.0) + tau)),
        );
        // B = Q diag(1/(lambda + tau)) Q^T, then A^+ = A^T B.
        let scaled = &eig.eigenvectors * DMatrix::from_diagonal(&inv);
        let b = scaled * eig.eigenvectors.transpose();
        let (col_ptr, rows_of_col, wgts) = transpose_index(a);
        let data = parallel::indexed_map(a.n, |c| {
            let mut out = vec![0.0f64; a.m];
            for s in col_ptr[c]..col_ptr[c + 1] {
                let r = rows_of_col[s] as usize;
                let w = wgts[s];
                for j in 0..a.m {
                    out[j] += w * b[(r, j)];
                }
            }
            out
        })
        .into_iter()
        .flatten()
        .collect();
        Ok(DenseOperator { rows: a.n, cols: a.m, data })
    } else {
        let eig = gram_cols(a).symmetric_eigen();
        let lam_max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        let lam_min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if tau == 0.0 && (lam_max == 0.0 || lam_min <= SINGULAR_RATIO * lam_max) {
            return Err(OperatorError::Singular { ratio: if lam_max > 0.0 { lam_min / lam_max } else { 0.0 } });
        }
        let inv = DVector::from_iterator(
            a.n,
            eig.eigenvalues.iter().map(|&l| 1.0 / (l.max(0.0) + tau)),
        );
        // B = V diag(1/(lambda + tau)) V^T, then A^+ = B A^T.
        let scaled = &eig.eigenvectors * DMatrix::from_diagonal(&inv);
        let b = scaled * eig.eigenvectors.transpose();
        let data = parallel::indexed_map(a.n, |c| {
            (0..a.m)
                .map(|r| {
                    let (cols, ws) = a.row(r);
                    cols.iter().zip(ws).map(|(&ci, &w)| b[(c, ci as usize)] * w).sum()
                })
                .collect::<Vec<f64>>()
        })
        .into_iter()
        .flatten()
        .collect();
        Ok(DenseOperator { rows: a.n, cols: a.m, data })
    }
}

/// Singular triples of `A`, descending, for truncated-SVD reconstruction.
pub struct SingularTriples {
    /// Singular values, largest first.
    pub s: Vec<f64>,
    /// Left vectors, each of length m.
    pub u: Vec<Vec<f64>>,
    /// Right vectors, each of length n.
    pub v: Vec<Vec<f64>>,
}

pub fn singular_triples(a: &SparseOperator) -> Result<SingularTriples, OperatorError> {
    check_dense_scale(a)?;
    let dense = DMatrix::from_row_slice(a.m, a.n, &a.to_dense());
    let svd = dense.svd(true, true);
    let u = svd.u.expect("requested");
    let vt = svd.v_t.expect("requested");
    let r = svd.singular_values.len();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let mut out = SingularTriples { s: Vec::with_capacity(r), u: Vec::with_capacity(r), v: Vec::with_capacity(r) };
    for &i in &order {
        out.s.push(svd.singular_values[i]);
        out.u.push(u.column(i).iter().cloned().collect());
        out.v.push(vt.row(i).iter().cloned().collect());
    }
    Ok(out)
}

/// Power-iteration estimate of the spectral norm. The zero operator yields 0.
pub fn op_norm(a: &SparseOperator, iters: usize) -> f64 {
    assert!(iters >= 10, "power iteration needs at least 10 rounds");
    let mut v = vec![1.0 / (a.n as f64).sqrt(); a.n];
    let mut sigma = 0.0;
    for _ in 0..iters {
        let u = a.apply(&v).expect("shape fixed");
        let w = a.apply_adjoint(&u).expect("shape fixed");
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        sigma = norm.sqrt();
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / norm;
        }
    }
    sigma
}
