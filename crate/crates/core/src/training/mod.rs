//! Gradient computation through adapted linear stacks and the mini-batch
//! training loop that updates only adapter latents (plus, optionally, a
//! trainable head layer as a second parameter group).

mod optim;

pub use optim::{adamw_step, lr_multiplier, AdamHyper, AdamState, Scheduler};

use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::Adapter;
use crate::digest::update_with_matrix;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::shuffled_indices;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(&self, z: &Matrix) -> Matrix {
        match self {
            Activation::None => z.clone(),
            Activation::Relu => Matrix::from_fn(z.rows(), z.cols(), |i, j| z.get(i, j).max(0.0)),
            Activation::Gelu => Matrix::from_fn(z.rows(), z.cols(), |i, j| gelu(z.get(i, j))),
        }
    }

    /// Entrywise derivative evaluated at the pre-activation.
    pub fn derivative(&self, z: &Matrix) -> Matrix {
        match self {
            Activation::None => Matrix::from_fn(z.rows(), z.cols(), |_, _| 1.0),
            Activation::Relu => Matrix::from_fn(z.rows(), z.cols(), |i, j| {
                if z.get(i, j) > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }),
            Activation::Gelu => {
                Matrix::from_fn(z.rows(), z.cols(), |i, j| gelu_derivative(z.get(i, j)))
            }
        }
    }
}

/// Exact (erf-based) GELU; the tanh approximation would spoil tight
/// finite-difference checks.
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_derivative(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let phi_pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf + x * phi_pdf
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    SoftmaxCrossEntropy,
}

/// Supervision: regression targets (one column per sample) or class labels.
#[derive(Debug, Clone)]
pub enum Targets {
    Values(Matrix),
    Labels(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Values(m) => m.cols(),
            Targets::Labels(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, indices: &[usize]) -> Targets {
        match self {
            Targets::Values(m) => Targets::Values(m.select_columns(indices)),
            Targets::Labels(l) => Targets::Labels(indices.iter().map(|&i| l[i]).collect()),
        }
    }
}

/// Inputs (one sample per column) with matching targets.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Matrix,
    pub targets: Targets,
}

impl Dataset {
    pub fn new(inputs: Matrix, targets: Targets) -> Result<Self> {
        if inputs.cols() != targets.len() {
            return Err(Error::Param {
                name: "targets",
                reason: format!("{} inputs but {} targets", inputs.cols(), targets.len()),
            });
        }
        Ok(Dataset { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn batch(&self, indices: &[usize]) -> (Matrix, Targets) {
        (
            self.inputs.select_columns(indices),
            self.targets.select(indices),
        )
    }
}

/// One linear layer: frozen base weight, optional adapter, activation. The
/// base weight is trained only when `train_weight` is set (the head group).
#[derive(Debug, Clone)]
pub struct Layer {
    pub weight: Matrix,
    pub adapter: Option<Adapter>,
    pub activation: Activation,
    pub train_weight: bool,
}

impl Layer {
    pub fn frozen(weight: Matrix, adapter: Option<Adapter>, activation: Activation) -> Self {
        Layer {
            weight,
            adapter,
            activation,
            train_weight: false,
        }
    }
}

/// An ordered stack of linear layers with a loss head.
#[derive(Debug, Clone)]
pub struct LinearStack {
    layers: Vec<Layer>,
    head: LossKind,
}

impl LinearStack {
    pub fn new(layers: Vec<Layer>, head: LossKind) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Param {
                name: "layers",
                reason: "at least one layer required".into(),
            });
        }
        for pair in layers.windows(2) {
            if pair[0].weight.rows() != pair[1].weight.cols() {
                return Err(Error::Shape {
                    op: "stack chaining",
                    left_rows: pair[0].weight.rows(),
                    left_cols: pair[0].weight.cols(),
                    right_rows: pair[1].weight.rows(),
                    right_cols: pair[1].weight.cols(),
                });
            }
        }
        for (i, layer) in layers.iter().enumerate() {
            if let Some(ad) = &layer.adapter {
                if ad.out_dim() != layer.weight.rows() || ad.in_dim() != layer.weight.cols() {
                    return Err(Error::Param {
                        name: "adapter",
                        reason: format!(
                            "layer {i}: adapter is {}x{} but weight is {}x{}",
                            ad.out_dim(),
                            ad.in_dim(),
                            layer.weight.rows(),
                            layer.weight.cols()
                        ),
                    });
                }
            }
        }
        Ok(LinearStack { layers, head })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn head(&self) -> LossKind {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.rows()
    }

    pub fn adapter(&self, layer: usize) -> Option<&Adapter> {
        self.layers[layer].adapter.as_ref()
    }

    pub fn adapter_mut(&mut self, layer: usize) -> Option<&mut Adapter> {
        self.layers[layer].adapter.as_mut()
    }

    /// Total trainable scalars across adapters and trainable weights.
    pub fn trainable_params(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| {
                let adapter = l.adapter.as_ref().map_or(0, |a| a.trainable_params());
                let head = if l.train_weight {
                    (l.weight.rows() * l.weight.cols()) as u64
                } else {
                    0
                };
                adapter + head
            })
            .sum()
    }

    /// SHA-256 over every trainable tensor, in layer order.
    pub fn trainable_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for layer in &self.layers {
            match &layer.adapter {
                Some(Adapter::LoraXs(a)) => update_with_matrix(&mut h, a.r_latent()),
                Some(Adapter::Lora(a)) => {
                    update_with_matrix(&mut h, a.a_train());
                    update_with_matrix(&mut h, a.b_train());
                }
                None => {}
            }
            if layer.train_weight {
                update_with_matrix(&mut h, &layer.weight);
            }
        }
        h.finalize().into()
    }

    /// SHA-256 over every frozen tensor (base weights not marked trainable
    /// plus the frozen projection pairs); must never change under training.
    pub fn frozen_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for layer in &self.layers {
            if !layer.train_weight {
                update_with_matrix(&mut h, &layer.weight);
            }
            if let Some(Adapter::LoraXs(a)) = &layer.adapter {
                update_with_matrix(&mut h, a.a_frozen());
                update_with_matrix(&mut h, a.b_frozen());
            }
        }
        h.finalize().into()
    }
}

/// Per-layer values retained by the forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Matrix>,
    preacts: Vec<Matrix>,
    batch: usize,
}

/// Applies every adapted layer then its activation; the cache keeps each
/// layer's input and pre-activation.
pub fn forward_model(model: &LinearStack, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
    if x.rows() != model.input_dim() {
        return Err(Error::Shape {
            op: "forward_model",
            left_rows: model.input_dim(),
            left_cols: 0,
            right_rows: x.rows(),
            right_cols: x.cols(),
        });
    }
    let mut inputs = Vec::with_capacity(model.layers.len());
    let mut preacts = Vec::with_capacity(model.layers.len());
    let mut current = x.clone();
    for layer in &model.layers {
        inputs.push(current.clone());
        let mut z = layer.weight.matmul(&current)?;
        if let Some(ad) = &layer.adapter {
            z = z.add(&ad.apply_delta(&current)?)?;
        }
        current = layer.activation.apply(&z);
        preacts.push(z);
    }
    Ok((
        current,
        ForwardCache {
            inputs,
            preacts,
            batch: x.cols(),
        },
    ))
}

/// Loss value and its gradient with respect to the predictions.
///
/// Mse: `||pred - target||_F^2 / (2 * batch)`. Softmax cross-entropy: mean
/// negative log-likelihood of the labeled class over the batch.
pub fn loss_and_grad(head: LossKind, pred: &Matrix, targets: &Targets) -> Result<(f64, Matrix)> {
    let batch = pred.cols() as f64;
    match (head, targets) {
        (LossKind::Mse, Targets::Values(t)) => {
            let diff = pred.sub(t)?;
            let loss = diff.frobenius_norm().powi(2) / (2.0 * batch);
            Ok((loss, diff.scaled(1.0 / batch)))
        }
        (LossKind::SoftmaxCrossEntropy, Targets::Labels(labels)) => {
            if labels.len() != pred.cols() {
                return Err(Error::Param {
                    name: "targets",
                    reason: format!("{} labels for {} columns", labels.len(), pred.cols()),
                });
            }
            let classes = pred.rows();
            let mut grad = Matrix::zeros(classes, pred.cols());
            let mut loss = 0.0;
            for (j, &label) in labels.iter().enumerate() {
                if label >= classes {
                    return Err(Error::Param {
                        name: "targets",
                        reason: format!("label {label} out of range for {classes} classes"),
                    });
                }
                let mut maxv = f64::NEG_INFINITY;
                for i in 0..classes {
                    maxv = maxv.max(pred.get(i, j));
                }
                let mut denom = 0.0;
                for i in 0..classes {
                    denom += (pred.get(i, j) - maxv).exp();
                }
                let log_denom = denom.ln() + maxv;
                loss += log_denom - pred.get(label, j);
                for i in 0..classes {
                    let p = (pred.get(i, j) - log_denom).exp();
                    let onehot = if i == label { 1.0 } else { 0.0 };
                    grad.set(i, j, (p - onehot) / batch);
                }
            }
            Ok((loss / batch, grad))
        }
        (LossKind::Mse, Targets::Labels(_)) => Err(Error::Param {
            name: "targets",
            reason: "mse head needs value targets".into(),
        }),
        (LossKind::SoftmaxCrossEntropy, Targets::Values(_)) => Err(Error::Param {
            name: "targets",
            reason: "softmax cross-entropy head needs labels".into(),
        }),
    }
}

/// Gradients for one layer's trainable tensors.
#[derive(Debug, Clone)]
pub enum AdapterGrads {
    LoraXs { d_r: Matrix },
    Lora { d_a: Matrix, d_b: Matrix },
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub adapter: Option<AdapterGrads>,
    pub weight: Option<Matrix>,
}

/// Backpropagates `upstream` (the loss gradient at the predictions) through
/// the stack, returning gradients for every trainable tensor.
///
/// With layer input X, pre-activation gradient G and scaling s:
/// the latent gradient is `s * B^T G (A X)^T`; the plain low-rank pair gets
/// `dB = s * G (A X)^T` and `dA = s * (B^T G) X^T`; a trainable weight gets
/// `G X^T`; the input gradient is `W^T G` plus the adapter's contribution.
pub fn backward_adapter_grads(
    model: &LinearStack,
    cache: &ForwardCache,
    upstream: &Matrix,
) -> Result<Vec<LayerGrads>> {
    let n_layers = model.layers.len();
    if cache.inputs.len() != n_layers || cache.preacts.len() != n_layers {
        return Err(Error::CacheMismatch {
            reason: format!(
                "cache has {} layers, model has {n_layers}",
                cache.inputs.len()
            ),
        });
    }
    if upstream.rows() != model.output_dim() || upstream.cols() != cache.batch {
        return Err(Error::CacheMismatch {
            reason: format!(
                "upstream is {}x{}, expected {}x{}",
                upstream.rows(),
                upstream.cols(),
                model.output_dim(),
                cache.batch
            ),
        });
    }
    for (idx, (layer, z)) in model.layers.iter().zip(&cache.preacts).enumerate() {
        if z.rows() != layer.weight.rows() || z.cols() != cache.batch {
            return Err(Error::CacheMismatch {
                reason: format!("layer {idx} pre-activation shape does not match the model"),
            });
        }
    }

    let mut grads: Vec<LayerGrads> = Vec::with_capacity(n_layers);
    let mut upstream = upstream.clone();
    for l in (0..n_layers).rev() {
        let layer = &model.layers[l];
        let x = &cache.inputs[l];
        let z = &cache.preacts[l];
        // Gradient with respect to the pre-activation.
        let g = hadamard(&upstream, &layer.activation.derivative(z))?;

        let adapter = match &layer.adapter {
            Some(Adapter::LoraXs(a)) => {
                let ax = a.a_frozen().matmul(x)?;
                let btg = a.b_frozen().transpose().matmul(&g)?;
                let d_r = btg.matmul(&ax.transpose())?.scaled(a.scaling());
                Some(AdapterGrads::LoraXs { d_r })
            }
            Some(Adapter::Lora(a)) => {
                let ax = a.a_train().matmul(x)?;
                let btg = a.b_train().transpose().matmul(&g)?;
                let d_b = g.matmul(&ax.transpose())?.scaled(a.scaling());
                let d_a = btg.matmul(&x.transpose())?.scaled(a.scaling());
                Some(AdapterGrads::Lora { d_a, d_b })
            }
            None => None,
        };
        let weight = if layer.train_weight {
            Some(g.matmul(&x.transpose())?)
        } else {
            None
        };
        grads.push(LayerGrads { adapter, weight });

        if l > 0 {
            let mut dx = layer.weight.transpose().matmul(&g)?;
            match &layer.adapter {
                Some(Adapter::LoraXs(a)) => {
                    let btg = a.b_frozen().transpose().matmul(&g)?;
                    let rtbtg = a.r_latent().transpose().matmul(&btg)?;
                    let extra = a.a_frozen().transpose().matmul(&rtbtg)?.scaled(a.scaling());
                    dx = dx.add(&extra)?;
                }
                Some(Adapter::Lora(a)) => {
                    let btg = a.b_train().transpose().matmul(&g)?;
                    let extra = a.a_train().transpose().matmul(&btg)?.scaled(a.scaling());
                    dx = dx.add(&extra)?;
                }
                None => {}
            }
            upstream = dx;
        }
    }
    grads.reverse();
    Ok(grads)
}

fn hadamard(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::Shape {
            op: "hadamard",
            left_rows: a.rows(),
            left_cols: a.cols(),
            right_rows: b.rows(),
            right_cols: b.cols(),
        });
    }
    Ok(Matrix::from_fn(a.rows(), a.cols(), |i, j| {
        a.get(i, j) * b.get(i, j)
    }))
}

/// Central-difference gradient of `loss_fn` at `at`, entry by entry:
/// `(L(R + eps E_ij) - L(R - eps E_ij)) / (2 eps)`.
pub fn finite_diff_grad(mut loss_fn: impl FnMut(&Matrix) -> f64, at: &Matrix, eps: f64) -> Matrix {
    assert!(eps > 0.0, "eps must be positive");
    let mut grad = Matrix::zeros(at.rows(), at.cols());
    for i in 0..at.rows() {
        for j in 0..at.cols() {
            let mut plus = at.clone();
            plus.set(i, j, at.get(i, j) + eps);
            let mut minus = at.clone();
            minus.set(i, j, at.get(i, j) - eps);
            grad.set(i, j, (loss_fn(&plus) - loss_fn(&minus)) / (2.0 * eps));
        }
    }
    grad
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Learning rate for adapter tensors.
    pub adapter_lr: f64,
    /// Learning rate for trainable head weights; defaults to `adapter_lr`.
    pub head_lr: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    pub scheduler: Scheduler,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Reserved global-norm clip; off by default.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adapter_lr: 1e-3,
            head_lr: None,
            epochs: 10,
            batch_size: 32,
            warmup_ratio: 0.06,
            scheduler: Scheduler::Cosine,
            weight_decay: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    fn validate(&self, dataset_len: usize) -> Result<()> {
        if self.adapter_lr.is_nan() || self.adapter_lr <= 0.0 {
            return Err(Error::Param {
                name: "adapter_lr",
                reason: format!("must be positive, got {}", self.adapter_lr),
            });
        }
        if let Some(lr) = self.head_lr {
            if lr.is_nan() || lr <= 0.0 {
                return Err(Error::Param {
                    name: "head_lr",
                    reason: format!("must be positive, got {lr}"),
                });
            }
        }
        if self.batch_size == 0 || self.batch_size > dataset_len {
            return Err(Error::Param {
                name: "batch_size",
                reason: format!(
                    "must lie in 1..={dataset_len} (dataset size), got {}",
                    self.batch_size
                ),
            });
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Param {
                name: "warmup_ratio",
                reason: format!("must lie in [0, 1), got {}", self.warmup_ratio),
            });
        }
        for (name, v) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0 < v && v < 1.0) {
                return Err(Error::Param {
                    name,
                    reason: format!("must lie in (0, 1), got {v}"),
                });
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::Param {
                name: "adam_eps",
                reason: format!("must be positive, got {}", self.adam_eps),
            });
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Param {
                name: "weight_decay",
                reason: format!("must be nonnegative, got {}", self.weight_decay),
            });
        }
        Ok(())
    }

    fn hyper(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    /// Mean training loss per epoch.
    pub loss_by_epoch: Vec<f64>,
    /// Optimizer steps taken.
    pub steps: u64,
    /// Digest over all trainable tensors after the run.
    pub final_params_digest: [u8; 32],
    pub config_echo: TrainConfig,
}

/// [`TrainRun`] plus the per-epoch evaluation metric, when an eval split was
/// supplied.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub run: TrainRun,
    pub eval_by_epoch: Vec<f64>,
}

/// Deterministic mini-batch training; see [`train_with_options`] for the
/// variant with an eval split and a CSV step log.
pub fn train(model: &mut LinearStack, data: &Dataset, config: &TrainConfig) -> Result<TrainRun> {
    train_with_options(model, data, None, config, None).map(|r| r.run)
}

/// Mini-batch AdamW training over `config.epochs` epochs with per-epoch
/// reshuffling derived from `(config.seed, epoch)`. Only adapter tensors and
/// weights marked trainable are updated. When `csv_log` is given, one
/// `epoch,step,loss,lr_multiplier` row is written per optimizer step.
pub fn train_with_options(
    model: &mut LinearStack,
    data: &Dataset,
    eval: Option<&Dataset>,
    config: &TrainConfig,
    csv_log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    let (report, diverged_at) = run_training(model, data, eval, config, csv_log, false)?;
    debug_assert!(diverged_at.is_none());
    Ok(report)
}

/// Like [`train_with_options`] but a divergence stops the run and reports the
/// step instead of erroring; completed epochs keep their losses. Used by
/// sweep harnesses that must survive bad arms.
pub(crate) fn train_resilient(
    model: &mut LinearStack,
    data: &Dataset,
    eval: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<(TrainReport, Option<u64>)> {
    run_training(model, data, eval, config, None, true)
}

fn run_training(
    model: &mut LinearStack,
    data: &Dataset,
    eval: Option<&Dataset>,
    config: &TrainConfig,
    mut csv_log: Option<&mut dyn Write>,
    resilient: bool,
) -> Result<(TrainReport, Option<u64>)> {
    if data.is_empty() {
        return Err(Error::Param {
            name: "data",
            reason: "dataset is empty".into(),
        });
    }
    config.validate(data.len())?;

    let n = data.len();
    let steps_per_epoch = n.div_ceil(config.batch_size) as u64;
    let total_steps = (config.epochs as u64 * steps_per_epoch).max(1);
    let hyper = config.hyper();
    let head_lr = config.head_lr.unwrap_or(config.adapter_lr);

    // One Adam state per trainable tensor, in stable (layer, tensor) order.
    let mut states: Vec<AdamState> = Vec::new();
    for layer in model.layers() {
        match &layer.adapter {
            Some(Adapter::LoraXs(a)) => states.push(AdamState::zeros_like(a.r_latent())),
            Some(Adapter::Lora(a)) => {
                states.push(AdamState::zeros_like(a.a_train()));
                states.push(AdamState::zeros_like(a.b_train()));
            }
            None => {}
        }
        if layer.train_weight {
            states.push(AdamState::zeros_like(&layer.weight));
        }
    }

    if let Some(log) = csv_log.as_deref_mut() {
        writeln!(log, "epoch,step,loss,lr_multiplier").map_err(|e| Error::io("csv log", e))?;
    }

    let mut loss_by_epoch = Vec::with_capacity(config.epochs);
    let mut eval_by_epoch = Vec::new();
    let mut step: u64 = 0;
    let mut diverged_at = None;
    'epochs: for epoch in 0..config.epochs {
        let order = shuffled_indices(n, config.seed, epoch as u64);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let (x, t) = data.batch(chunk);
            let (pred, cache) = forward_model(model, &x)?;
            let (loss, dl_dpred) = loss_and_grad(model.head(), &pred, &t)?;
            if !loss.is_finite() {
                if resilient {
                    diverged_at = Some(step);
                    break 'epochs;
                }
                return Err(Error::Diverged { step });
            }
            epoch_loss += loss * chunk.len() as f64;

            let mut grads = backward_adapter_grads(model, &cache, &dl_dpred)?;
            if let Some(max_norm) = config.grad_clip {
                clip_global_norm(&mut grads, max_norm);
            }

            let mult = lr_multiplier(step - 1, total_steps, config.warmup_ratio, config.scheduler);
            let adapter_lr = config.adapter_lr * mult;
            let head_lr = head_lr * mult;
            match apply_updates(
                model,
                &grads,
                &mut states,
                step,
                adapter_lr,
                head_lr,
                &hyper,
            ) {
                Ok(()) => {}
                Err(Error::BadGradient { step }) if resilient => {
                    diverged_at = Some(step);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }

            if let Some(log) = csv_log.as_deref_mut() {
                writeln!(log, "{epoch},{step},{loss},{mult}")
                    .map_err(|e| Error::io("csv log", e))?;
            }
        }
        loss_by_epoch.push(epoch_loss / n as f64);
        if let Some(eval_data) = eval {
            let value = eval_metric(model, eval_data)?;
            if !value.is_finite() && resilient {
                // Parameters blew up after the last loss check; treat the
                // epoch as not completed.
                loss_by_epoch.pop();
                diverged_at = Some(step);
                break;
            }
            eval_by_epoch.push(value);
        }
    }

    Ok((
        TrainReport {
            run: TrainRun {
                loss_by_epoch,
                steps: step,
                final_params_digest: model.trainable_digest(),
                config_echo: config.clone(),
            },
            eval_by_epoch,
        },
        diverged_at,
    ))
}

fn clip_global_norm(grads: &mut [LayerGrads], max_norm: f64) {
    let mut sq = 0.0;
    for g in grads.iter() {
        match &g.adapter {
            Some(AdapterGrads::LoraXs { d_r }) => sq += d_r.frobenius_norm().powi(2),
            Some(AdapterGrads::Lora { d_a, d_b }) => {
                sq += d_a.frobenius_norm().powi(2) + d_b.frobenius_norm().powi(2);
            }
            None => {}
        }
        if let Some(w) = &g.weight {
            sq += w.frobenius_norm().powi(2);
        }
    }
    let norm = sq.sqrt();
    if norm <= max_norm || norm == 0.0 {
        return;
    }
    let scale = max_norm / norm;
    for g in grads.iter_mut() {
        match &mut g.adapter {
            Some(AdapterGrads::LoraXs { d_r }) => *d_r = d_r.scaled(scale),
            Some(AdapterGrads::Lora { d_a, d_b }) => {
                *d_a = d_a.scaled(scale);
                *d_b = d_b.scaled(scale);
            }
            None => {}
        }
        if let Some(w) = &mut g.weight {
            *w = w.scaled(scale);
        }
    }
}

fn apply_updates(
    model: &mut LinearStack,
    grads: &[LayerGrads],
    states: &mut [AdamState],
    step: u64,
    adapter_lr: f64,
    head_lr: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    let mut slot = 0;
    for (layer, lg) in model.layers.iter_mut().zip(grads) {
        match (&mut layer.adapter, &lg.adapter) {
            (Some(Adapter::LoraXs(a)), Some(AdapterGrads::LoraXs { d_r })) => {
                adamw_step(
                    a.r_latent_mut(),
                    d_r,
                    &mut states[slot],
                    step,
                    adapter_lr,
                    hyper,
                )?;
                slot += 1;
            }
            (Some(Adapter::Lora(a)), Some(AdapterGrads::Lora { d_a, d_b })) => {
                adamw_step(
                    a.a_train_mut(),
                    d_a,
                    &mut states[slot],
                    step,
                    adapter_lr,
                    hyper,
                )?;
                slot += 1;
                adamw_step(
                    a.b_train_mut(),
                    d_b,
                    &mut states[slot],
                    step,
                    adapter_lr,
                    hyper,
                )?;
                slot += 1;
            }
            (None, None) => {}
            _ => {
                return Err(Error::CacheMismatch {
                    reason: "gradient set does not match model adapters".into(),
                })
            }
        }
        if layer.train_weight {
            let g = lg.weight.as_ref().ok_or_else(|| Error::CacheMismatch {
                reason: "missing weight gradient for trainable layer".into(),
            })?;
            adamw_step(
                &mut layer.weight,
                g,
                &mut states[slot],
                step,
                head_lr,
                hyper,
            )?;
            slot += 1;
        }
    }
    Ok(())
}

/// Mean head loss over a dataset (single full-batch forward).
pub fn dataset_loss(model: &LinearStack, data: &Dataset) -> Result<f64> {
    let (pred, _) = forward_model(model, &data.inputs)?;
    Ok(loss_and_grad(model.head(), &pred, &data.targets)?.0)
}

/// Fraction of samples whose argmax prediction matches the label.
pub fn accuracy(model: &LinearStack, data: &Dataset) -> Result<f64> {
    let labels = match &data.targets {
        Targets::Labels(l) => l,
        Targets::Values(_) => {
            return Err(Error::Param {
                name: "data",
                reason: "accuracy needs label targets".into(),
            })
        }
    };
    let (pred, _) = forward_model(model, &data.inputs)?;
    let mut hits = 0usize;
    for (j, &label) in labels.iter().enumerate() {
        let mut best = f64::NEG_INFINITY;
        let mut arg = 0usize;
        for i in 0..pred.rows() {
            if pred.get(i, j) > best {
                best = pred.get(i, j);
                arg = i;
            }
        }
        if arg == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

/// Evaluation metric with "lower is better" semantics: head loss for value
/// targets, error rate (1 - accuracy) for labels.
pub fn eval_metric(model: &LinearStack, data: &Dataset) -> Result<f64> {
    match &data.targets {
        Targets::Values(_) => dataset_loss(model, data),
        Targets::Labels(_) => Ok(1.0 - accuracy(model, data)?),
    }
}
