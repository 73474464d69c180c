//! Singular values by one-sided (Hestenes) Jacobi rotations.
//!
//! The matrices analysed here are tiny (filter unfoldings, Hankel systems of
//! at most a few hundred rows), so the quadratic-per-sweep cost is irrelevant.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rotation threshold on `|a_i . a_j| / (|a_i| |a_j|)`.
const ORTHOGONALITY_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 80;

/// Singular values of a rank-2 tensor, sorted in decreasing order.
pub fn singular_values(m: &Tensor) -> Result<Vec<f64>> {
    if m.rank() != 2 {
        return Err(Error::Shape(format!(
            "singular values need a matrix, got shape {:?}",
            m.shape()
        )));
    }
    // Orthogonalise the columns of whichever orientation has fewer of them.
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let a = if cols > rows { m.transpose()? } else { m.clone() };
    let (rows, cols) = (a.shape()[0], a.shape()[1]);

    // Column-major copy so each column is contiguous.
    let mut c: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| a.data()[i * cols + j]).collect())
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..cols {
            for j in i + 1..cols {
                let alpha: f64 = c[i].iter().map(|v| v * v).sum();
                let beta: f64 = c[j].iter().map(|v| v * v).sum();
                let gamma: f64 = c[i].iter().zip(&c[j]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= ORTHOGONALITY_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                let (left, right) = c.split_at_mut(j);
                for (x, y) in left[i].iter_mut().zip(right[0].iter_mut()) {
                    let (xi, yj) = (*x, *y);
                    *x = cs * xi - sn * yj;
                    *y = sn * xi + cs * yj;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sv: Vec<f64> = c.iter().map(|col| col.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// Number of singular values above `rel_tol` times the largest one.
pub fn numerical_rank(m: &Tensor, rel_tol: f64) -> Result<usize> {
    if !(rel_tol > 0.0 && rel_tol < 1.0) {
        return Err(Error::InvalidArgument(format!("rel_tol {rel_tol} must lie in (0, 1)")));
    }
    if m.is_empty() {
        return Err(Error::Empty("matrix"));
    }
    let sv = singular_values(m)?;
    let top = sv[0];
    if top == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s > rel_tol * top).count())
}
