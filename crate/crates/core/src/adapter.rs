//! Low-rank adapters for single linear layers.
//!
//! Two kinds live here. [`LoraXsAdapter`] freezes both projection matrices
//! and trains only an r x r latent between them: the frozen pair comes either
//! from the weight's truncated SVD (so the update acts inside the top-r
//! singular subspace) or from a Kaiming draw (the ablation baseline). The
//! delta it contributes is `(alpha / rank) * B * R * A`. [`LoraAdapter`] is
//! the plain baseline with trainable `A` and `B` and delta
//! `(alpha / rank) * B * A`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{truncated_svd, Matrix, DEFAULT_SVD_ITERS};
use crate::rng;

/// How the frozen projection pair of a [`LoraXsAdapter`] was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Svd,
    Random,
}

impl std::fmt::Display for InitKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InitKind::Svd => write!(f, "svd"),
            InitKind::Random => write!(f, "random"),
        }
    }
}

impl std::str::FromStr for InitKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "svd" => Ok(InitKind::Svd),
            "random" => Ok(InitKind::Random),
            other => Err(format!("unknown init kind `{other}` (expected svd|random)")),
        }
    }
}

/// Adapter with frozen projections and a trainable r x r latent.
///
/// Shapes for an m x n base weight: `b_frozen` is m x r, `a_frozen` is r x n,
/// `r_latent` is r x r. The frozen pair never changes after construction; the
/// latent is the only trainable state and is reachable through
/// [`LoraXsAdapter::set_r_latent`] / [`LoraXsAdapter::r_latent_mut`].
#[derive(Debug, Clone)]
pub struct LoraXsAdapter {
    a_frozen: Matrix,
    b_frozen: Matrix,
    r_latent: Matrix,
    rank: usize,
    alpha: f64,
    init_kind: InitKind,
    /// Seed that produced the frozen pair (SVD sketch seed or Kaiming seed).
    svd_seed: u64,
    /// Power-iteration count used for SVD initialization (0 for random init).
    n_iter: u32,
    sigma: f64,
}

fn check_rank(rank: usize, m: usize, n: usize) -> Result<()> {
    let k = m.min(n);
    if rank == 0 || rank > k {
        return Err(Error::Param {
            name: "rank",
            reason: format!("rank {rank} outside 1..={k} for an {m}x{n} layer"),
        });
    }
    Ok(())
}

fn check_alpha_sigma(alpha: f64, sigma: f64) -> Result<()> {
    if alpha.is_nan() || alpha <= 0.0 {
        return Err(Error::Param {
            name: "alpha",
            reason: format!("alpha must be strictly positive, got {alpha}"),
        });
    }
    if sigma.is_nan() || sigma < 0.0 {
        return Err(Error::Param {
            name: "sigma",
            reason: format!("sigma must be nonnegative, got {sigma}"),
        });
    }
    Ok(())
}

/// Builds an adapter whose frozen pair comes from the truncated SVD of `w`:
/// `b_frozen = U_r diag(S_r)` and `a_frozen = V_r^T`, so the contributed
/// delta is `(alpha/rank) * U_r S_r R V_r^T`. The latent starts as i.i.d.
/// Gaussian noise with std `sigma`, drawn from `r_seed`.
pub fn init_loraxs_svd(
    w: &Matrix,
    rank: usize,
    alpha: f64,
    sigma: f64,
    svd_seed: u64,
    r_seed: u64,
) -> Result<LoraXsAdapter> {
    check_rank(rank, w.rows(), w.cols())?;
    check_alpha_sigma(alpha, sigma)?;
    let factors = truncated_svd(w, rank, DEFAULT_SVD_ITERS, svd_seed)?;
    let b_frozen = factors.u.scale_columns(&factors.s)?;
    let a_frozen = factors.v.transpose();
    let mut rng = rng::seeded(r_seed);
    let r_latent = rng::gaussian_matrix(rank, rank, sigma, &mut rng);
    Ok(LoraXsAdapter {
        a_frozen,
        b_frozen,
        r_latent,
        rank,
        alpha,
        init_kind: InitKind::Svd,
        svd_seed,
        n_iter: DEFAULT_SVD_ITERS,
        sigma,
    })
}

/// Ablation baseline: the frozen pair is Kaiming-uniform instead of
/// SVD-derived. `a_frozen` uses fan-in n, `b_frozen` fan-in rank; the latent
/// is Gaussian with std `sigma`. All three draws come from the single `seed`,
/// in the order a, b, latent.
pub fn init_loraxs_random(
    m: usize,
    n: usize,
    rank: usize,
    alpha: f64,
    sigma: f64,
    seed: u64,
) -> Result<LoraXsAdapter> {
    check_rank(rank, m, n)?;
    check_alpha_sigma(alpha, sigma)?;
    let mut rng = rng::seeded(seed);
    let a_frozen = rng::kaiming_uniform_matrix(rank, n, n, &mut rng);
    let b_frozen = rng::kaiming_uniform_matrix(m, rank, rank, &mut rng);
    let r_latent = rng::gaussian_matrix(rank, rank, sigma, &mut rng);
    Ok(LoraXsAdapter {
        a_frozen,
        b_frozen,
        r_latent,
        rank,
        alpha,
        init_kind: InitKind::Random,
        svd_seed: seed,
        n_iter: 0,
        sigma,
    })
}

impl LoraXsAdapter {
    pub fn a_frozen(&self) -> &Matrix {
        &self.a_frozen
    }

    pub fn b_frozen(&self) -> &Matrix {
        &self.b_frozen
    }

    pub fn r_latent(&self) -> &Matrix {
        &self.r_latent
    }

    /// Single mutation door for the latent; used by the optimizer and by
    /// warm starts. Frozen matrices have no counterpart on purpose.
    pub fn r_latent_mut(&mut self) -> &mut Matrix {
        &mut self.r_latent
    }

    /// Replaces the latent, validating its shape.
    pub fn set_r_latent(&mut self, r: Matrix) -> Result<()> {
        if r.rows() != self.rank || r.cols() != self.rank {
            return Err(Error::Shape {
                op: "set_r_latent",
                left_rows: self.rank,
                left_cols: self.rank,
                right_rows: r.rows(),
                right_cols: r.cols(),
            });
        }
        self.r_latent = r;
        Ok(())
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `alpha / rank`, the multiplier applied to the low-rank update.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn init_kind(&self) -> InitKind {
        self.init_kind
    }

    pub fn svd_seed(&self) -> u64 {
        self.svd_seed
    }

    pub fn n_iter(&self) -> u32 {
        self.n_iter
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Output dimension m of the wrapped layer.
    pub fn out_dim(&self) -> usize {
        self.b_frozen.rows()
    }

    /// Input dimension n of the wrapped layer.
    pub fn in_dim(&self) -> usize {
        self.a_frozen.cols()
    }

    /// Number of trainable scalars: exactly rank^2.
    pub fn trainable_params(&self) -> u64 {
        (self.rank * self.rank) as u64
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        a_frozen: Matrix,
        b_frozen: Matrix,
        r_latent: Matrix,
        alpha: f64,
        init_kind: InitKind,
        svd_seed: u64,
        n_iter: u32,
        sigma: f64,
    ) -> Self {
        let rank = r_latent.rows();
        LoraXsAdapter {
            a_frozen,
            b_frozen,
            r_latent,
            rank,
            alpha,
            init_kind,
            svd_seed,
            n_iter,
            sigma,
        }
    }
}

/// Plain low-rank adapter: trainable `a_train` (r x n) and `b_train` (m x r).
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    a_train: Matrix,
    b_train: Matrix,
    rank: usize,
    alpha: f64,
}

/// Standard baseline initialization: `b_train` starts at zero so training
/// begins at the unmodified base function; `a_train` is Kaiming-uniform.
pub fn init_lora_baseline(
    m: usize,
    n: usize,
    rank: usize,
    alpha: f64,
    seed: u64,
) -> Result<LoraAdapter> {
    check_rank(rank, m, n)?;
    check_alpha_sigma(alpha, 0.0)?;
    let mut rng = rng::seeded(seed);
    let a_train = rng::kaiming_uniform_matrix(rank, n, n, &mut rng);
    let b_train = Matrix::zeros(m, rank);
    Ok(LoraAdapter {
        a_train,
        b_train,
        rank,
        alpha,
    })
}

impl LoraAdapter {
    pub fn a_train(&self) -> &Matrix {
        &self.a_train
    }

    pub fn b_train(&self) -> &Matrix {
        &self.b_train
    }

    pub fn a_train_mut(&mut self) -> &mut Matrix {
        &mut self.a_train
    }

    pub fn b_train_mut(&mut self) -> &mut Matrix {
        &mut self.b_train
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn out_dim(&self) -> usize {
        self.b_train.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.a_train.cols()
    }

    /// Number of trainable scalars: rank * (m + n).
    pub fn trainable_params(&self) -> u64 {
        (self.rank * (self.out_dim() + self.in_dim())) as u64
    }
}

/// Either adapter kind, as attached to a layer.
#[derive(Debug, Clone)]
pub enum Adapter {
    LoraXs(LoraXsAdapter),
    Lora(LoraAdapter),
}

impl Adapter {
    pub fn rank(&self) -> usize {
        match self {
            Adapter::LoraXs(a) => a.rank(),
            Adapter::Lora(a) => a.rank(),
        }
    }

    pub fn scaling(&self) -> f64 {
        match self {
            Adapter::LoraXs(a) => a.scaling(),
            Adapter::Lora(a) => a.scaling(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Adapter::LoraXs(a) => a.out_dim(),
            Adapter::Lora(a) => a.out_dim(),
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Adapter::LoraXs(a) => a.in_dim(),
            Adapter::Lora(a) => a.in_dim(),
        }
    }

    pub fn trainable_params(&self) -> u64 {
        match self {
            Adapter::LoraXs(a) => a.trainable_params(),
            Adapter::Lora(a) => a.trainable_params(),
        }
    }

    /// Applies the adapter's contribution to a batch of column inputs without
    /// materializing the full delta: A first, then the core, then B, then the
    /// scaling factor.
    pub fn apply_delta(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            Adapter::LoraXs(a) => {
                let ax = a.a_frozen.matmul(x)?;
                let rax = a.r_latent.matmul(&ax)?;
                Ok(a.b_frozen.matmul(&rax)?.scaled(a.scaling()))
            }
            Adapter::Lora(a) => {
                let ax = a.a_train.matmul(x)?;
                Ok(a.b_train.matmul(&ax)?.scaled(a.scaling()))
            }
        }
    }
}

/// The full m x n update contributed by the adapter:
/// `(alpha/rank) * B * R * A` or `(alpha/rank) * B * A`.
pub fn delta_weight(adapter: &Adapter) -> Matrix {
    let d = match adapter {
        Adapter::LoraXs(a) => {
            let ra = a
                .r_latent
                .matmul(&a.a_frozen)
                .expect("shape fixed at construction");
            a.b_frozen.matmul(&ra).expect("shape fixed at construction")
        }
        Adapter::Lora(a) => a
            .b_train
            .matmul(&a.a_train)
            .expect("shape fixed at construction"),
    };
    d.scaled(adapter.scaling())
}

/// Adapted forward pass `h = w x + delta x`, computed without materializing
/// the delta. `x` holds one input per column.
pub fn forward_adapted(w: &Matrix, adapter: &Adapter, x: &Matrix) -> Result<Matrix> {
    if w.rows() != adapter.out_dim() || w.cols() != adapter.in_dim() {
        return Err(Error::Shape {
            op: "forward_adapted",
            left_rows: w.rows(),
            left_cols: w.cols(),
            right_rows: adapter.out_dim(),
            right_cols: adapter.in_dim(),
        });
    }
    let base = w.matmul(x)?;
    let delta = adapter.apply_delta(x)?;
    base.add(&delta)
}

/// Folds the adapter into the base weight: returns `w + delta_weight`.
/// `w` itself is untouched.
pub fn merge(w: &Matrix, adapter: &Adapter) -> Result<Matrix> {
    if w.rows() != adapter.out_dim() || w.cols() != adapter.in_dim() {
        return Err(Error::Shape {
            op: "merge",
            left_rows: w.rows(),
            left_cols: w.cols(),
            right_rows: adapter.out_dim(),
            right_cols: adapter.in_dim(),
        });
    }
    w.add(&delta_weight(adapter))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::digest::matrix_digest;
    use crate::testutil::rng_matrix;

    #[test]
    fn svd_init_on_diagonal_weight() {
        let w = Matrix::diag(&[3.0, 2.0, 1.0]);
        let ad = init_loraxs_svd(&w, 2, 2.0, 0.0, 7, 8).unwrap();
        // b * a recovers the rank-2 truncation regardless of sign choices.
        let ba = ad.b_frozen().matmul(ad.a_frozen()).unwrap();
        let expect = Matrix::diag(&[3.0, 2.0, 0.0]);
        assert!(ba.max_abs_diff(&expect) < 1e-10);
        assert_eq!((ad.b_frozen().rows(), ad.b_frozen().cols()), (3, 2));
        assert_eq!((ad.a_frozen().rows(), ad.a_frozen().cols()), (2, 3));
    }

    #[test]
    fn sigma_zero_means_zero_delta() {
        let w = rng_matrix(6, 5, 1);
        let ad = init_loraxs_svd(&w, 3, 8.0, 0.0, 1, 2).unwrap();
        assert!(ad.r_latent().data().iter().all(|&x| x == 0.0));
        let delta = delta_weight(&Adapter::LoraXs(ad));
        assert_eq!(delta.frobenius_norm(), 0.0);
    }

    #[test]
    fn svd_init_is_reproducible() {
        let w = rng_matrix(9, 7, 2);
        let a1 = init_loraxs_svd(&w, 3, 8.0, 1e-5, 11, 22).unwrap();
        let a2 = init_loraxs_svd(&w, 3, 8.0, 1e-5, 11, 22).unwrap();
        assert_eq!(matrix_digest(a1.a_frozen()), matrix_digest(a2.a_frozen()));
        assert_eq!(matrix_digest(a1.b_frozen()), matrix_digest(a2.b_frozen()));
        assert_eq!(matrix_digest(a1.r_latent()), matrix_digest(a2.r_latent()));
    }

    #[test]
    fn rank_out_of_range_is_rejected() {
        let w = rng_matrix(4, 6, 3);
        assert!(init_loraxs_svd(&w, 0, 1.0, 0.0, 0, 0).is_err());
        assert!(init_loraxs_svd(&w, 5, 1.0, 0.0, 0, 0).is_err());
        assert!(init_loraxs_random(4, 6, 7, 1.0, 0.0, 0).is_err());
        assert!(init_lora_baseline(4, 6, 0, 1.0, 0).is_err());
    }

    #[test]
    fn invalid_alpha_or_sigma_is_rejected() {
        let w = rng_matrix(4, 4, 3);
        assert!(init_loraxs_svd(&w, 2, 0.0, 0.0, 0, 0).is_err());
        assert!(init_loraxs_svd(&w, 2, -1.0, 0.0, 0, 0).is_err());
        assert!(init_loraxs_svd(&w, 2, 1.0, -0.5, 0, 0).is_err());
    }

    #[test]
    fn random_init_respects_kaiming_bounds() {
        let ad = init_loraxs_random(12, 20, 4, 4.0, 0.0, 5).unwrap();
        let bound_a = (6.0 / 20.0f64).sqrt();
        let bound_b = (6.0 / 4.0f64).sqrt();
        assert!(ad.a_frozen().data().iter().all(|x| x.abs() <= bound_a));
        assert!(ad.b_frozen().data().iter().all(|x| x.abs() <= bound_b));
    }

    #[test]
    fn random_init_seed_sensitivity() {
        let a = init_loraxs_random(8, 8, 2, 2.0, 1e-5, 1).unwrap();
        let b = init_loraxs_random(8, 8, 2, 2.0, 1e-5, 1).unwrap();
        let c = init_loraxs_random(8, 8, 2, 2.0, 1e-5, 2).unwrap();
        assert_eq!(matrix_digest(a.a_frozen()), matrix_digest(b.a_frozen()));
        assert_eq!(matrix_digest(a.r_latent()), matrix_digest(b.r_latent()));
        assert_ne!(matrix_digest(a.a_frozen()), matrix_digest(c.a_frozen()));
    }

    #[test]
    fn random_init_sigma_zero_forward_equals_base() {
        let w = rng_matrix(8, 8, 4);
        let ad = Adapter::LoraXs(init_loraxs_random(8, 8, 2, 2.0, 0.0, 9).unwrap());
        let x = rng_matrix(8, 3, 5);
        let h = forward_adapted(&w, &ad, &x).unwrap();
        assert_eq!(h, w.matmul(&x).unwrap());
    }

    #[test]
    fn lora_baseline_starts_at_base_function() {
        let ad = init_lora_baseline(6, 10, 3, 6.0, 1).unwrap();
        assert_eq!((ad.a_train().rows(), ad.a_train().cols()), (3, 10));
        assert_eq!((ad.b_train().rows(), ad.b_train().cols()), (6, 3));
        assert_eq!(ad.trainable_params(), 3 * (6 + 10));
        let delta = delta_weight(&Adapter::Lora(ad));
        assert_eq!(delta.frobenius_norm(), 0.0);
    }

    #[test]
    fn latent_identity_recovers_truncation() {
        let w = Matrix::diag(&[3.0, 2.0, 1.0]);
        let rank = 2;
        let alpha = rank as f64;
        let mut ad = init_loraxs_svd(&w, rank, alpha, 0.0, 3, 4).unwrap();
        ad.set_r_latent(Matrix::identity(rank)).unwrap();
        let delta = delta_weight(&Adapter::LoraXs(ad));
        assert!(delta.max_abs_diff(&Matrix::diag(&[3.0, 2.0, 0.0])) < 1e-10);
    }

    #[test]
    fn hand_computed_delta_and_forward() {
        let w = Matrix::diag(&[2.0, 1.0]);
        let mut ad = init_loraxs_svd(&w, 1, 1.0, 0.0, 0, 0).unwrap();
        ad.set_r_latent(Matrix::new(1, 1, vec![0.5]).unwrap())
            .unwrap();
        let ad = Adapter::LoraXs(ad);
        let delta = delta_weight(&ad);
        let expect = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]).unwrap();
        assert!(delta.max_abs_diff(&expect) < 1e-12);

        let x = Matrix::new(2, 1, vec![1.0, 1.0]).unwrap();
        let h = forward_adapted(&w, &ad, &x).unwrap();
        assert!((h.get(0, 0) - 3.0).abs() < 1e-12);
        assert!((h.get(1, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batched_forward_matches_columnwise() {
        let w = rng_matrix(7, 5, 6);
        let mut xs = init_loraxs_svd(&w, 2, 4.0, 0.0, 1, 1).unwrap();
        xs.set_r_latent(rng_matrix(2, 2, 8)).unwrap();
        let ad = Adapter::LoraXs(xs);
        let x = rng_matrix(5, 8, 7);
        let batched = forward_adapted(&w, &ad, &x).unwrap();
        for j in 0..8 {
            let col = x.select_columns(&[j]);
            let single = forward_adapted(&w, &ad, &col).unwrap();
            for i in 0..7 {
                assert!((batched.get(i, j) - single.get(i, 0)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn merge_zero_latent_is_bit_identical() {
        let w = rng_matrix(6, 6, 9);
        let ad = Adapter::LoraXs(init_loraxs_svd(&w, 2, 2.0, 0.0, 0, 0).unwrap());
        let merged = merge(&w, &ad).unwrap();
        assert_eq!(matrix_digest(&merged), matrix_digest(&w));
    }

    #[test]
    fn merge_matches_hand_case() {
        let w = Matrix::diag(&[2.0, 1.0]);
        let mut xs = init_loraxs_svd(&w, 1, 1.0, 0.0, 0, 0).unwrap();
        xs.set_r_latent(Matrix::new(1, 1, vec![0.5]).unwrap())
            .unwrap();
        let merged = merge(&w, &Adapter::LoraXs(xs)).unwrap();
        assert!(merged.max_abs_diff(&Matrix::diag(&[3.0, 1.0])) < 1e-12);
    }

    #[test]
    fn merged_forward_equals_adapted_forward() {
        for seed in 0..4u64 {
            let w = rng_matrix(9, 6, 100 + seed);
            let mut xs = init_loraxs_svd(&w, 3, 8.0, 0.0, seed, seed).unwrap();
            xs.set_r_latent(rng_matrix(3, 3, 200 + seed)).unwrap();
            let ad = Adapter::LoraXs(xs);
            let x = rng_matrix(6, 5, 300 + seed);
            let merged = merge(&w, &ad).unwrap();
            let via_merge = merged.matmul(&x).unwrap();
            let via_adapter = forward_adapted(&w, &ad, &x).unwrap();
            assert!(via_merge.max_abs_diff(&via_adapter) < 1e-12);
        }
    }

    #[test]
    fn near_identity_start_with_small_sigma() {
        let w = rng_matrix(16, 16, 10);
        let ad = Adapter::LoraXs(init_loraxs_svd(&w, 4, 4.0, 1e-5, 1, 2).unwrap());
        let x = rng_matrix(16, 8, 11);
        let base = w.matmul(&x).unwrap();
        let adapted = forward_adapted(&w, &ad, &x).unwrap();
        let rel = adapted.sub(&base).unwrap().frobenius_norm() / base.frobenius_norm();
        assert!(rel < 1e-3, "relative deviation {rel}");
    }

    #[test]
    fn trainable_census() {
        let w = rng_matrix(10, 14, 12);
        let xs = init_loraxs_svd(&w, 4, 4.0, 0.0, 0, 0).unwrap();
        assert_eq!(xs.trainable_params(), 16);
        let lora = init_lora_baseline(10, 14, 4, 4.0, 0).unwrap();
        assert_eq!(lora.trainable_params(), 4 * 24);
    }
}
