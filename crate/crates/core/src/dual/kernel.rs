//! Null space of the stacked constraint matrix `(K, D̃)`.
//!
//! Row `(i, j)` of `K` is `e_i + e_{M+j}` and `D̃` is the column of `d_ij`, so
//! `(a, b, c)` lies in the kernel iff `a_i + b_j + c d_ij = 0` for all pairs.
//! The gauge direction `(1_M; -1_N; 0)` is always there; for a generic metric
//! it is the whole kernel. The dual Hessian is `(K, D̃)ᵀ Diag(Q) (K, D̃)`, so
//! with `Q > 0` it shares that kernel.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::gauge_direction;

/// Relative singular-value cutoff for rank decisions.
pub const RANK_THRESHOLD: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelReport {
    pub rank: usize,
    pub null_dim: usize,
    /// The gauge direction lies in the computed null space.
    pub gauge_in_kernel: bool,
    /// `null_dim > 1`, e.g. for a constant or additively separable metric.
    pub degenerate: bool,
}

/// `(K, D̃)` as an `MN × (M+N+1)` matrix.
pub fn constraint_matrix(d: ArrayView2<f64>) -> DMatrix<f64> {
    let (m, n) = d.dim();
    let mut a = DMatrix::zeros(m * n, m + n + 1);
    for i in 0..m {
        for j in 0..n {
            let r = i * n + j;
            a[(r, i)] = 1.0;
            a[(r, m + j)] = 1.0;
            a[(r, m + n)] = d[[i, j]];
        }
    }
    a
}

/// Rank and null space of `(K, D̃)` from a full SVD.
pub fn kernel_report(d: ArrayView2<f64>) -> KernelReport {
    let (m, n) = d.dim();
    let cols = m + n + 1;
    let mut a = constraint_matrix(d);
    if a.nrows() < cols {
        // Pad with zero rows so that V is square.
        a = a.resize_vertically(cols, 0.0);
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let smax = svd.singular_values.max();
    let cutoff = RANK_THRESHOLD * smax;
    let null_rows: Vec<usize> = (0..cols).filter(|&k| svd.singular_values[k] <= cutoff).collect();
    let rank = cols - null_rows.len();

    // Project the normalized gauge direction onto the computed null space.
    let k = DVector::from_vec(gauge_direction(m, n)).normalize();
    let captured: f64 = null_rows
        .iter()
        .map(|&r| {
            let v = v_t.row(r).transpose();
            v.dot(&k).powi(2)
        })
        .sum();
    KernelReport {
        rank,
        null_dim: null_rows.len(),
        gauge_in_kernel: (captured - 1.0).abs() <= 1e-8,
        degenerate: null_rows.len() > 1,
    }
}

/// Null dimension of a symmetric PSD matrix: eigenvalues at or below
/// `RANK_THRESHOLD` times the largest, after symmetric Jacobi scaling.
/// Scaling is a congruence, so the null dimension is unchanged, but rows
/// with tiny mass no longer look singular.
pub fn hessian_null_dimension(h: &DMatrix<f64>) -> usize {
    let s: Vec<f64> = (0..h.nrows())
        .map(|i| {
            let d = h[(i, i)];
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let scaled = DMatrix::from_fn(h.nrows(), h.ncols(), |i, j| h[(i, j)] * s[i] * s[j]);
    let eig = SymmetricEigen::new(scaled);
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    eig.eigenvalues.iter().filter(|&&v| v.abs() <= RANK_THRESHOLD * top).count()
}
