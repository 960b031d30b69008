//! Randomized truncated SVD: Gaussian sketch, power iterations with QR
//! re-orthonormalization, then a small dense SVD of the projected matrix.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{normalize_signs, qr_thin, svd_dense_with_cap, Matrix, SvdFactors};
use crate::error::{Error, Result};

/// Default number of power iterations.
pub const DEFAULT_SVD_ITERS: u32 = 10;
/// Oversampling cap: the sketch is `rank + min(MAX_OVERSAMPLING, k - rank)`
/// columns wide and is truncated back to `rank` after the small SVD.
pub const MAX_OVERSAMPLING: usize = 10;

/// Rank-`rank` truncated SVD of `w` via randomized range finding.
///
/// Deterministic for a fixed `(w, rank, n_iter, seed)`; singular values come
/// back nonincreasing and both factor matrices have orthonormal columns, even
/// for rank-deficient or all-zero inputs.
pub fn truncated_svd(w: &Matrix, rank: usize, n_iter: u32, seed: u64) -> Result<SvdFactors> {
    let (m, n) = (w.rows(), w.cols());
    let k = m.min(n);
    if rank == 0 || rank > k {
        return Err(Error::Param {
            name: "rank",
            reason: format!("rank {rank} outside 1..={k} for a {m}x{n} matrix"),
        });
    }
    let width = rank + MAX_OVERSAMPLING.min(k - rank);

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let omega = Matrix::from_fn(n, width, |_, _| StandardNormal.sample(&mut rng));

    let mut q = qr_thin(&w.matmul(&omega)?)?.q;
    let wt = w.transpose();
    for _ in 0..n_iter {
        let z = qr_thin(&wt.matmul(&q)?)?.q;
        q = qr_thin(&w.matmul(&z)?)?.q;
    }

    let projected = q.transpose().matmul(w)?; // width x n
    let small = svd_dense_with_cap(&projected, width)?;

    let mut u = q.matmul(&small.u)?.take_columns(rank);
    let mut v = small.v.take_columns(rank);
    let s = small.s[..rank].to_vec();
    normalize_signs(&mut u, &mut v);
    Ok(SvdFactors { u, s, v })
}
