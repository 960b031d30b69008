//! Synthetic tasks and the SVD-versus-random initialization ablation.
//!
//! The teacher tasks hide a low-rank weight update behind noisy linear
//! regression targets. On the aligned variant the hidden update lives inside
//! the base weight's own top singular subspace, so an SVD-initialized adapter
//! of matching rank can represent it exactly; the random variant plants the
//! update in a generic subspace to probe the opposite regime. A small blobs
//! classification task exercises the cross-entropy path.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{init_loraxs_random, init_loraxs_svd, Adapter, InitKind, LoraXsAdapter};
use crate::error::{Error, Result};
use crate::linalg::{truncated_svd, Matrix, DEFAULT_SVD_ITERS};
use crate::rng::{gaussian_matrix, seeded, split_seed};
use crate::training::{
    eval_metric, train_resilient, Activation, Dataset, Layer, LinearStack, LossKind, Targets,
    TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    AlignedTeacher,
    RandomTeacher,
    BlobsClassification,
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "aligned_teacher" | "aligned" => Ok(TaskKind::AlignedTeacher),
            "random_teacher" | "random" => Ok(TaskKind::RandomTeacher),
            "blobs_classification" | "blobs" => Ok(TaskKind::BlobsClassification),
            other => Err(format!(
                "unknown task kind `{other}` (expected aligned_teacher|random_teacher|blobs_classification)"
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub input_dim: usize,
    pub output_dim: usize,
    /// Extra frozen linear layers stacked after the adapted layer.
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    /// Rank of the hidden teacher update (classes count for blobs).
    pub rank_star: usize,
    pub noise_std: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            kind: TaskKind::AlignedTeacher,
            input_dim: 64,
            output_dim: 64,
            hidden_dims: Vec::new(),
            rank_star: 4,
            noise_std: 0.0,
            n_samples: 256,
            seed: 0,
        }
    }
}

/// A generated task: base weights, the hidden target update (teachers only),
/// and an 80/20 train/eval split.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub spec: TaskSpec,
    /// Layer weights, adapted layer first.
    pub base_weights: Vec<Matrix>,
    /// The hidden update the student should learn (teacher tasks).
    pub target_delta: Option<Matrix>,
    /// The teacher's latent in the adapted layer's singular basis
    /// (aligned task only).
    pub teacher_latent: Option<Matrix>,
    /// Seed for the truncated SVD shared by the teacher construction and
    /// SVD-initialized student adapters.
    pub svd_seed: u64,
    pub train: Dataset,
    pub eval: Dataset,
}

/// Generates a task deterministically from its spec.
pub fn gen_task(spec: &TaskSpec) -> Result<SyntheticTask> {
    if spec.input_dim == 0 || spec.output_dim == 0 {
        return Err(Error::Param {
            name: "dims",
            reason: "input and output dimensions must be positive".into(),
        });
    }
    if spec.n_samples < 2 {
        return Err(Error::Param {
            name: "n_samples",
            reason: "need at least 2 samples for an 80/20 split".into(),
        });
    }
    if spec.noise_std < 0.0 {
        return Err(Error::Param {
            name: "noise_std",
            reason: "noise std must be nonnegative".into(),
        });
    }
    let first_out = *spec.hidden_dims.first().unwrap_or(&spec.output_dim);
    let max_rank = first_out.min(spec.input_dim);
    if spec.rank_star == 0 || spec.rank_star > max_rank {
        return Err(Error::Param {
            name: "rank_star",
            reason: format!("rank_star {} outside 1..={max_rank}", spec.rank_star),
        });
    }

    // Chain dims: input -> hidden... -> output; the adapted layer is first.
    let mut dims = vec![spec.input_dim];
    dims.extend_from_slice(&spec.hidden_dims);
    dims.push(spec.output_dim);
    let mut base_weights = Vec::with_capacity(dims.len() - 1);
    for (i, pair) in dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let mut rng = seeded(split_seed(spec.seed, 0x10 + i as u64));
        base_weights.push(gaussian_matrix(
            fan_out,
            fan_in,
            1.0 / (fan_in as f64).sqrt(),
            &mut rng,
        ));
    }

    let svd_seed = split_seed(spec.seed, 0x5d);
    let w0 = &base_weights[0];

    let (target_delta, teacher_latent) = match spec.kind {
        TaskKind::AlignedTeacher => {
            let factors = truncated_svd(w0, spec.rank_star, DEFAULT_SVD_ITERS, svd_seed)?;
            let b = factors.u.scale_columns(&factors.s)?;
            let a = factors.v.transpose();
            let mut rng = seeded(split_seed(spec.seed, 0x20));
            let latent = gaussian_matrix(spec.rank_star, spec.rank_star, 0.5, &mut rng);
            let delta = b.matmul(&latent.matmul(&a)?)?;
            (Some(delta), Some(latent))
        }
        TaskKind::RandomTeacher => {
            let mut rng = seeded(split_seed(spec.seed, 0x30));
            let p = gaussian_matrix(w0.rows(), spec.rank_star, 1.0, &mut rng);
            let q = gaussian_matrix(spec.rank_star, w0.cols(), 1.0, &mut rng);
            let raw = p.matmul(&q)?;
            // Match the aligned task's update magnitude so the two arms are
            // comparable: a fixed fraction of the base weight's norm.
            let delta = raw.scaled(0.25 * w0.frobenius_norm() / raw.frobenius_norm());
            (Some(delta), None)
        }
        TaskKind::BlobsClassification => (None, None),
    };

    let (inputs, targets) = match spec.kind {
        TaskKind::BlobsClassification => {
            let classes = spec.output_dim;
            let mut rng = seeded(split_seed(spec.seed, 0x40));
            let centers = gaussian_matrix(classes, spec.input_dim, 2.0, &mut rng);
            let mut labels = Vec::with_capacity(spec.n_samples);
            let mut inputs = Matrix::zeros(spec.input_dim, spec.n_samples);
            for j in 0..spec.n_samples {
                let class = rng.random_range(0..classes);
                labels.push(class);
                for i in 0..spec.input_dim {
                    let noise: f64 =
                        rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                    inputs.set(i, j, centers.get(class, i) + noise);
                }
            }
            (inputs, Targets::Labels(labels))
        }
        _ => {
            let mut rng = seeded(split_seed(spec.seed, 0x50));
            let inputs = gaussian_matrix(spec.input_dim, spec.n_samples, 1.0, &mut rng);
            // Teacher: the adapted layer carries the hidden update, the rest
            // of the chain is shared with the student.
            let mut h = base_weights[0]
                .add(target_delta.as_ref().expect("teacher delta"))?
                .matmul(&inputs)?;
            for w in &base_weights[1..] {
                h = w.matmul(&h)?;
            }
            let mut noise_rng = seeded(split_seed(spec.seed, 0x60));
            let noise = gaussian_matrix(h.rows(), h.cols(), spec.noise_std, &mut noise_rng);
            (inputs, Targets::Values(h.add(&noise)?))
        }
    };

    let n_train = (spec.n_samples * 8) / 10;
    let n_train = n_train.max(1).min(spec.n_samples - 1);
    let train_idx: Vec<usize> = (0..n_train).collect();
    let eval_idx: Vec<usize> = (n_train..spec.n_samples).collect();
    let select = |idx: &[usize]| -> Dataset {
        let sel_inputs = inputs.select_columns(idx);
        let sel_targets = match &targets {
            Targets::Values(m) => Targets::Values(m.select_columns(idx)),
            Targets::Labels(l) => Targets::Labels(idx.iter().map(|&i| l[i]).collect()),
        };
        Dataset::new(sel_inputs, sel_targets).expect("split sizes match")
    };

    Ok(SyntheticTask {
        spec: spec.clone(),
        target_delta,
        teacher_latent,
        svd_seed,
        train: select(&train_idx),
        eval: select(&eval_idx),
        base_weights,
    })
}

impl SyntheticTask {
    fn head(&self) -> LossKind {
        match self.spec.kind {
            TaskKind::BlobsClassification => LossKind::SoftmaxCrossEntropy,
            _ => LossKind::Mse,
        }
    }
}

/// Builds the student model for a task: the adapter (if any) sits on the
/// first layer, every base weight is frozen.
pub fn build_model(task: &SyntheticTask, adapter: Option<Adapter>) -> Result<LinearStack> {
    let mut layers = Vec::with_capacity(task.base_weights.len());
    for (i, w) in task.base_weights.iter().enumerate() {
        let ad = if i == 0 { adapter.clone() } else { None };
        layers.push(Layer::frozen(w.clone(), ad, Activation::None));
    }
    LinearStack::new(layers, task.head())
}

/// How the scaling hyperparameter is chosen per rank in a sweep.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaRule {
    /// alpha = rank, so the update multiplier is exactly 1.
    EqualsRank,
    Fixed(f64),
}

impl AlphaRule {
    pub fn alpha_for(self, rank: usize) -> f64 {
        match self {
            AlphaRule::EqualsRank => rank as f64,
            AlphaRule::Fixed(a) => a,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationConfig {
    pub alpha: AlphaRule,
    pub sigma: f64,
    pub train: TrainConfig,
    /// Worker threads for the sweep; `None` uses the global pool.
    pub jobs: Option<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            alpha: AlphaRule::EqualsRank,
            sigma: 1e-5,
            train: TrainConfig {
                adapter_lr: 5e-2,
                ..TrainConfig::default()
            },
            jobs: None,
        }
    }
}

/// The default rank grid for initialization sweeps.
pub const DEFAULT_ABLATION_RANKS: [usize; 4] = [4, 8, 12, 20];

/// One (rank, init, seed, epoch) observation. `eval_loss` is the task's eval
/// metric: mean squared error for teacher tasks, error rate (1 - accuracy)
/// for blobs. Epochs are 1-based. After a divergence the remaining epochs
/// repeat the last finite values and carry the flag.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRecord {
    pub rank: usize,
    pub init_kind: InitKind,
    pub seed: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub diverged: bool,
}

/// Builds the student adapter for one sweep arm.
pub fn make_adapter(
    task: &SyntheticTask,
    rank: usize,
    init: InitKind,
    alpha: f64,
    sigma: f64,
    run_seed: u64,
) -> Result<LoraXsAdapter> {
    let w0 = &task.base_weights[0];
    match init {
        InitKind::Svd => init_loraxs_svd(
            w0,
            rank,
            alpha,
            sigma,
            task.svd_seed,
            split_seed(run_seed, 0x72),
        ),
        InitKind::Random => init_loraxs_random(
            w0.rows(),
            w0.cols(),
            rank,
            alpha,
            sigma,
            split_seed(run_seed, 0x4b),
        ),
    }
}

/// Trains one model per `(rank, init, seed)` and records losses at every
/// epoch. Arms run in parallel (they share nothing mutable) and the record
/// order is independent of scheduling. Diverged arms are flagged, never
/// fatal; the record count is always `ranks * inits * seeds * epochs`.
pub fn run_ablation(
    task: &SyntheticTask,
    ranks: &[usize],
    init_kinds: &[InitKind],
    seeds: &[u64],
    config: &AblationConfig,
) -> Result<Vec<AblationRecord>> {
    if ranks.is_empty() || init_kinds.is_empty() || seeds.is_empty() {
        return Err(Error::Param {
            name: "ranks/init_kinds/seeds",
            reason: "sweep lists must be nonempty".into(),
        });
    }
    let mut arms = Vec::new();
    for &rank in ranks {
        for &init in init_kinds {
            for &seed in seeds {
                arms.push((rank, init, seed));
            }
        }
    }

    let run_all = || -> Result<Vec<Vec<AblationRecord>>> {
        arms.par_iter()
            .map(|&(rank, init, seed)| run_arm(task, rank, init, seed, config))
            .collect()
    };
    let nested = match config.jobs {
        Some(jobs) => rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| Error::Param {
                name: "jobs",
                reason: e.to_string(),
            })?
            .install(run_all),
        None => run_all(),
    }?;

    let mut records: Vec<AblationRecord> = nested.into_iter().flatten().collect();
    records.sort_by(|a, b| {
        (a.rank, a.init_kind as u8, a.seed, a.epoch).cmp(&(
            b.rank,
            b.init_kind as u8,
            b.seed,
            b.epoch,
        ))
    });
    Ok(records)
}

fn run_arm(
    task: &SyntheticTask,
    rank: usize,
    init: InitKind,
    seed: u64,
    config: &AblationConfig,
) -> Result<Vec<AblationRecord>> {
    let alpha = config.alpha.alpha_for(rank);
    let adapter = make_adapter(task, rank, init, alpha, config.sigma, seed)?;
    let mut model = build_model(task, Some(Adapter::LoraXs(adapter)))?;
    // Fallback values if the arm diverges before completing its first epoch.
    let initial_train = crate::training::dataset_loss(&model, &task.train)?;
    let initial_eval = eval_metric(&model, &task.eval)?;

    let train_cfg = TrainConfig {
        seed,
        ..config.train.clone()
    };
    let (report, diverged_at) =
        train_resilient(&mut model, &task.train, Some(&task.eval), &train_cfg)?;

    let epochs = train_cfg.epochs;
    let completed = report
        .run
        .loss_by_epoch
        .len()
        .min(report.eval_by_epoch.len());
    let mut records = Vec::with_capacity(epochs);
    let mut last = (initial_train, initial_eval);
    for epoch in 0..epochs {
        let (train_loss, eval_loss, diverged) = if epoch < completed {
            last = (report.run.loss_by_epoch[epoch], report.eval_by_epoch[epoch]);
            (last.0, last.1, false)
        } else {
            (last.0, last.1, diverged_at.is_some())
        };
        records.push(AblationRecord {
            rank,
            init_kind: init,
            seed,
            epoch: epoch + 1,
            train_loss,
            eval_loss,
            diverged,
        });
    }
    Ok(records)
}

/// Evaluates the aligned task's training loss with the student latent set
/// directly to the teacher's (scaled for the update multiplier). This is the
/// representability witness: the minimum is essentially zero by construction.
pub fn representable_train_loss(task: &SyntheticTask, alpha: f64) -> Result<f64> {
    let latent = task.teacher_latent.as_ref().ok_or_else(|| Error::Param {
        name: "task",
        reason: "representability needs an aligned teacher task".into(),
    })?;
    let rank = task.spec.rank_star;
    let mut adapter = make_adapter(task, rank, InitKind::Svd, alpha, 0.0, 0)?;
    adapter.set_r_latent(latent.scaled(rank as f64 / alpha))?;
    let model = build_model(task, Some(Adapter::LoraXs(adapter)))?;
    crate::training::dataset_loss(&model, &task.train)
}

/// Per-(rank, init) medians across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub rank: usize,
    pub init_kind: InitKind,
    /// Median over seeds of each seed's best (lowest) eval loss.
    pub median_best: f64,
    /// Median eval loss after the first epoch.
    pub median_ep1: f64,
    /// Median eval loss after the second epoch (NaN when absent).
    pub median_ep2: f64,
}

/// Aggregates records into per-(rank, init) medians. Order-free: shuffling
/// the input changes nothing.
pub fn summarize(records: &[AblationRecord]) -> Result<Vec<SummaryRow>> {
    if records.is_empty() {
        return Err(Error::Param {
            name: "records",
            reason: "no records to summarize".into(),
        });
    }
    use std::collections::BTreeMap;
    // (rank, init) -> seed -> [(epoch, eval_loss)]
    type SeedSeries = BTreeMap<u64, Vec<(usize, f64)>>;
    let mut groups: BTreeMap<(usize, u8), SeedSeries> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.rank, r.init_kind as u8))
            .or_default()
            .entry(r.seed)
            .or_default()
            .push((r.epoch, r.eval_loss));
    }
    let mut rows = Vec::with_capacity(groups.len());
    for ((rank, init_tag), seeds) in groups {
        let mut best = Vec::new();
        let mut ep1 = Vec::new();
        let mut ep2 = Vec::new();
        for by_epoch in seeds.values() {
            let b = by_epoch
                .iter()
                .map(|&(_, l)| l)
                .fold(f64::INFINITY, f64::min);
            best.push(b);
            if let Some(&(_, l)) = by_epoch.iter().find(|&&(e, _)| e == 1) {
                ep1.push(l);
            }
            if let Some(&(_, l)) = by_epoch.iter().find(|&&(e, _)| e == 2) {
                ep2.push(l);
            }
        }
        rows.push(SummaryRow {
            rank,
            init_kind: if init_tag == InitKind::Svd as u8 {
                InitKind::Svd
            } else {
                InitKind::Random
            },
            median_best: median(&mut best),
            median_ep1: median(&mut ep1),
            median_ep2: median(&mut ep2),
        });
    }
    Ok(rows)
}

/// Median as the middle order statistic (mean of the two middles for even
/// counts); NaN for an empty slice.
pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite losses"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// `rank,init,seed,epoch,train_loss,eval_loss,diverged` rows.
pub fn records_to_csv(records: &[AblationRecord]) -> String {
    let mut out = String::from("rank,init,seed,epoch,train_loss,eval_loss,diverged\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.rank, r.init_kind, r.seed, r.epoch, r.train_loss, r.eval_loss, r.diverged
        ));
    }
    out
}

/// `rank,init,median_best,median_ep1,median_ep2` rows.
pub fn summary_to_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("rank,init,median_best,median_ep1,median_ep2\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.rank, r.init_kind, r.median_best, r.median_ep1, r.median_ep2
        ));
    }
    out
}

/// Aligned text table of a summary.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:>5}  {:<7}  {:>13}  {:>13}  {:>13}\n",
        "rank", "init", "median_best", "median_ep1", "median_ep2"
    ));
    for r in rows {
        out.push_str(&format!(
            "{:>5}  {:<7}  {:>13.6e}  {:>13.6e}  {:>13.6e}\n",
            r.rank,
            r.init_kind.to_string(),
            r.median_best,
            r.median_ep1,
            r.median_ep2
        ));
    }
    out
}
