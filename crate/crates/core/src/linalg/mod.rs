//! Linear algebra kernels: banded LU, small dense eigenproblems, polynomial roots.

pub mod band;
pub mod poly;
pub mod scalar;

pub use band::{BandLu, BandMatrix, SymBand};
pub use scalar::{axpy, dot, dot_real, norm2, to_complex, Scalar};

use crate::error::{Error, Result};
use nalgebra::DMatrix;

/// Dense symmetric-definite generalized eigenproblem `K v = w M v`.
///
/// Returns eigenvalues ascending and `M`-orthonormal eigenvectors as columns.
pub fn sym_gen_eigen(k: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = k.nrows();
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular { context: "mass matrix not positive definite".into(), pivot: 0 })?;
    let l = chol.l();
    let linv = l
        .clone()
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| Error::Singular { context: "mass Cholesky factor".into(), pivot: 0 })?;
    let mut a = &linv * k * linv.transpose();
    a = (&a + a.transpose()) * 0.5;
    let eig = a.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].partial_cmp(&eig.eigenvalues[j]).unwrap());
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let y = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    let v = linv.transpose() * y;
    Ok((vals, v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_dof_chain() {
        // springs k=1 ground-m-m, masses 1
        let k = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 1.0]);
        let m = DMatrix::identity(2, 2);
        let (w, v) = sym_gen_eigen(&k, &m).unwrap();
        let s5 = 5f64.sqrt();
        assert!((w[0] - (3.0 - s5) / 2.0).abs() < 1e-14);
        assert!((w[1] - (3.0 + s5) / 2.0).abs() < 1e-14);
        let g = v.transpose() * &m * &v;
        assert!((g - DMatrix::identity(2, 2)).abs().max() < 1e-14);
    }
}
