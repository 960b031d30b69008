//! Thin Householder QR with a nonnegative-diagonal sign convention.

use super::Matrix;
use crate::error::{Error, Result};

/// Result of [`qr_thin`]: `q` (m x n, orthonormal columns), `r` (n x n upper
/// triangular, nonnegative diagonal), and the indices of columns where the
/// pivot collapsed to zero (rank deficiency; `r` has an exact 0 there).
#[derive(Debug, Clone)]
pub struct QrFactors {
    pub q: Matrix,
    pub r: Matrix,
    pub deficient_cols: Vec<usize>,
}

/// Thin QR factorization of a tall matrix (rows >= cols): `a = q * r`.
///
/// Deficient pivots never abort; the affected Q column falls back to the
/// back-accumulated orthonormal direction so `q` keeps orthonormal columns,
/// and the column index is flagged in [`QrFactors::deficient_cols`].
pub fn qr_thin(a: &Matrix) -> Result<QrFactors> {
    let (m, n) = (a.rows(), a.cols());
    if m < n {
        return Err(Error::Param {
            name: "a",
            reason: format!("qr_thin requires rows >= cols, got {m}x{n}"),
        });
    }

    let mut work = a.clone();
    // Householder vectors, one per processed column; empty when skipped.
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut deficient = Vec::new();

    let scale = a.frobenius_norm();
    let tol = scale * f64::EPSILON * (m.max(n) as f64);

    for k in 0..n {
        let mut norm2 = 0.0;
        for i in k..m {
            let x = work.get(i, k);
            norm2 += x * x;
        }
        let norm = norm2.sqrt();

        if norm <= tol {
            // Column already (numerically) zero below and at the pivot.
            deficient.push(k);
            for i in k..m {
                work.set(i, k, 0.0);
            }
            reflectors.push(Vec::new());
            continue;
        }

        let pivot = work.get(k, k);
        let alpha = if pivot >= 0.0 { -norm } else { norm };
        let mut v = vec![0.0; m - k];
        v[0] = pivot - alpha;
        for i in (k + 1)..m {
            v[i - k] = work.get(i, k);
        }
        let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut v {
            *x /= vnorm;
        }

        work.set(k, k, alpha);
        for i in (k + 1)..m {
            work.set(i, k, 0.0);
        }
        for j in (k + 1)..n {
            let mut dot = 0.0;
            for i in k..m {
                dot += v[i - k] * work.get(i, j);
            }
            for i in k..m {
                let w = work.get(i, j);
                work.set(i, j, w - 2.0 * dot * v[i - k]);
            }
        }
        reflectors.push(v);
    }

    // R = top n x n block of the transformed matrix.
    let mut r = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            r.set(i, j, work.get(i, j));
        }
    }

    // Q = H_0 ... H_{n-1} applied to the first n columns of the identity.
    let mut q = Matrix::from_fn(m, n, |i, j| if i == j { 1.0 } else { 0.0 });
    for k in (0..n).rev() {
        let v = &reflectors[k];
        if v.is_empty() {
            continue;
        }
        for j in 0..n {
            let mut dot = 0.0;
            for i in k..m {
                dot += v[i - k] * q.get(i, j);
            }
            for i in k..m {
                let w = q.get(i, j);
                q.set(i, j, w - 2.0 * dot * v[i - k]);
            }
        }
    }

    // Nonnegative-diagonal convention: flip matching Q column / R row pairs.
    for j in 0..n {
        if r.get(j, j) < 0.0 {
            for jj in j..n {
                let x = r.get(j, jj);
                r.set(j, jj, -x);
            }
            for i in 0..m {
                let x = q.get(i, j);
                q.set(i, j, -x);
            }
        }
    }

    Ok(QrFactors {
        q,
        r,
        deficient_cols: deficient,
    })
}
