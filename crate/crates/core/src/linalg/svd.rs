//! Dense SVD via one-sided Jacobi rotations.
//!
//! Serves two roles: the exact oracle for small matrices, and the final
//! factorization step of the randomized truncated SVD. One-sided Jacobi
//! orthogonalizes the columns of the working matrix; at convergence the
//! column norms are the singular values and the normalized columns are U.

use super::{normalize_signs, Matrix, SvdFactors};
use crate::error::{Error, Result};

/// Largest `min(rows, cols)` accepted by [`svd_dense`].
pub const DENSE_SVD_CAP: usize = 512;
/// Convergence threshold on the relative off-diagonal Gram mass.
pub const JACOBI_TOL: f64 = 1e-12;
/// Sweep budget before giving up.
pub const JACOBI_MAX_SWEEPS: usize = 60;

/// Full-rank dense SVD (`k = min(m, n)`) with the default size cap.
pub fn svd_dense(a: &Matrix) -> Result<SvdFactors> {
    svd_dense_with_cap(a, DENSE_SVD_CAP)
}

/// Full-rank dense SVD with an explicit size cap on `min(m, n)`.
pub fn svd_dense_with_cap(a: &Matrix, cap: usize) -> Result<SvdFactors> {
    let k = a.rows().min(a.cols());
    if k > cap {
        return Err(Error::Param {
            name: "a",
            reason: format!(
                "min dimension {k} exceeds the dense SVD cap {cap}; use the truncated SVD"
            ),
        });
    }
    if a.rows() >= a.cols() {
        jacobi_tall(a)
    } else {
        // Factor the transpose and swap the roles of U and V.
        let f = jacobi_tall(&a.transpose())?;
        Ok(SvdFactors {
            u: f.v,
            s: f.s,
            v: f.u,
        })
    }
}

/// One-sided Jacobi on a tall matrix (m >= n).
fn jacobi_tall(a: &Matrix) -> Result<SvdFactors> {
    let (m, n) = (a.rows(), a.cols());
    let mut work = a.clone();
    let mut v = Matrix::identity(n);

    let mut converged = n == 1;
    let mut sweeps = 0;
    while !converged {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::NoConvergence {
                sweeps: JACOBI_MAX_SWEEPS,
            });
        }
        sweeps += 1;
        let mut worst = 0.0f64;
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..m {
                    let ap = work.get(i, p);
                    let aq = work.get(i, q);
                    alpha += ap * ap;
                    beta += aq * aq;
                    gamma += ap * aq;
                }
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let rel = gamma.abs() / (alpha * beta).sqrt();
                worst = worst.max(rel);
                if rel <= JACOBI_TOL {
                    continue;
                }
                // Rotation zeroing the (p, q) Gram entry. signum(0.0) is 1.0,
                // which yields the 45-degree rotation needed when alpha == beta.
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let ap = work.get(i, p);
                    let aq = work.get(i, q);
                    work.set(i, p, c * ap - s * aq);
                    work.set(i, q, s * ap + c * aq);
                }
                for i in 0..n {
                    let vp = v.get(i, p);
                    let vq = v.get(i, q);
                    v.set(i, p, c * vp - s * vq);
                    v.set(i, q, s * vp + c * vq);
                }
            }
        }
        converged = worst <= JACOBI_TOL;
    }

    // Singular values are the column norms; sort nonincreasing.
    let mut sigma: Vec<f64> = (0..n)
        .map(|j| {
            let mut acc = 0.0;
            for i in 0..m {
                let x = work.get(i, j);
                acc += x * x;
            }
            acc.sqrt()
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| sigma[y].partial_cmp(&sigma[x]).unwrap().then(x.cmp(&y)));
    let work = work.select_columns(&order);
    let v = v.select_columns(&order);
    sigma = order.iter().map(|&j| sigma[j]).collect();

    // Normalize columns into U; directions below the noise floor get a
    // deterministic orthonormal completion so U^T U = I still holds.
    let floor = sigma[0] * f64::EPSILON * (m.max(n) as f64);
    let mut u = Matrix::zeros(m, n);
    for (j, &sv) in sigma.iter().enumerate() {
        if sv > floor {
            for i in 0..m {
                u.set(i, j, work.get(i, j) / sv);
            }
        } else {
            complete_column(&mut u, j);
        }
    }

    let mut v = v;
    normalize_signs(&mut u, &mut v);
    Ok(SvdFactors { u, s: sigma, v })
}

/// Fills column `j` of `u` with a unit vector orthogonal to columns `0..j`,
/// chosen deterministically: the canonical basis vector with the largest
/// residual after projecting out the existing columns (ties to the lowest
/// index), re-orthogonalized once for accuracy.
fn complete_column(u: &mut Matrix, j: usize) {
    let m = u.rows();
    debug_assert!(j < m, "completion requires spare dimensions");
    let project_out = |col: &mut [f64]| {
        for prev in 0..j {
            let mut dot = 0.0;
            for (i, x) in col.iter().enumerate() {
                dot += u.get(i, prev) * x;
            }
            for (i, x) in col.iter_mut().enumerate() {
                *x -= dot * u.get(i, prev);
            }
        }
    };

    let mut best: Option<(f64, Vec<f64>)> = None;
    for candidate in 0..m {
        let mut col = vec![0.0; m];
        col[candidate] = 1.0;
        project_out(&mut col);
        let norm2 = col.iter().map(|x| x * x).sum::<f64>();
        if best.as_ref().is_none_or(|(b, _)| norm2 > *b) {
            best = Some((norm2, col));
        }
    }
    let (_, mut col) = best.expect("m > 0");
    // Second projection pass tightens orthogonality against earlier columns.
    project_out(&mut col);
    let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
    for (i, x) in col.iter().enumerate() {
        u.set(i, j, x / norm);
    }
}
