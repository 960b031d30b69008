//! Seeded randomness helpers. Every stochastic choice in the crate flows
//! through a ChaCha12 stream keyed by an explicit caller-provided seed, so
//! equal seeds give bit-identical results.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::Matrix;

pub(crate) fn seeded(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Derives an independent sub-seed from `(seed, tag)` (splitmix64 finalizer).
pub fn split_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Row-major fill with i.i.d. Gaussian entries, mean 0 and the given std.
/// `std == 0` short-circuits to exact zeros (no draws consumed).
pub(crate) fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut ChaCha12Rng) -> Matrix {
    if std == 0.0 {
        return Matrix::zeros(rows, cols);
    }
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

/// Kaiming-uniform fill: entries drawn from
/// `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, row-major order.
pub(crate) fn kaiming_uniform_matrix(
    rows: usize,
    cols: usize,
    fan_in: usize,
    rng: &mut ChaCha12Rng,
) -> Matrix {
    let bound = (6.0 / fan_in as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

/// Deterministic permutation of `0..len` for `(seed, epoch)`. The epoch picks
/// the ChaCha stream so consecutive epochs reshuffle independently.
pub(crate) fn shuffled_indices(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_add(1));
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut rng);
    idx
}
