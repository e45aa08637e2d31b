//! Head-only fine-tuning with mini-batch gradient descent.

use serde::{Deserialize, Serialize};

use crate::classifier::LinearClassifier;
use crate::data::{oversample_epoch, Dataset};
use crate::error::{arg, Error, Result};
use crate::eval::ScoreMatrix;
use crate::linalg::dot;
use crate::losses::{positive_weights, Loss, LossKind, LossParams};

/// Cosine annealing with warm restarts: `base_lr·(1 + cos(π·t/T))/2` with
/// `t = step mod T`.
pub fn lr_at(base_lr: f64, restart_period_steps: usize, step: usize) -> f64 {
    let period = restart_period_steps.max(1);
    let t = (step % period) as f64 / period as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    /// Adaptive moments with zero weight decay.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub const fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::adam()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            gamma: crate::losses::FOCAL_GAMMA,
            alpha: crate::losses::FOCAL_ALPHA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub optimizer: Optimizer,
    /// Warm-restart period in epochs.
    pub restart_period: usize,
    pub loss: LossKind,
    pub focal: FocalParams,
    /// Per-class minimum appearances per epoch; classes without positives
    /// are exempt.
    pub min_count: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 128,
            base_lr: 1e-4,
            optimizer: Optimizer::default(),
            restart_period: 5,
            loss: LossKind::LseSign,
            focal: FocalParams::default(),
            min_count: 40,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(arg("batch_size must be positive"));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(arg("base_lr must be a finite non-negative real"));
        }
        if self.restart_period == 0 {
            return Err(arg("restart_period must be ≥ 1"));
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                return Err(arg("adam needs betas in [0, 1) and eps > 0"));
            }
        }
        Ok(())
    }

    /// Materializes the configured loss; weighted BCE takes its class
    /// weights from the training set.
    pub fn build_loss(&self, dataset: &Dataset) -> Result<Loss> {
        let params = LossParams {
            pos_weights: (self.loss == LossKind::WeightedBce)
                .then(|| positive_weights(dataset.train_counts(), dataset.len())),
            focal_gamma: self.focal.gamma,
            alpha: self.focal.alpha,
        };
        Loss::new(self.loss, &params)
    }
}

/// Per-epoch record of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    /// Mean per-sample loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Learning rate at the first step of each epoch.
    pub epoch_lrs: Vec<f64>,
    pub steps_per_epoch: usize,
    pub total_steps: usize,
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Trains `classifier` in place. `∂L/∂W_i = g_i·γ·x` and `∂L/∂b_i = g_i`,
/// averaged over each mini-batch.
pub fn train(config: &TrainConfig, dataset: &Dataset, classifier: &mut LinearClassifier) -> Result<TrainHistory> {
    config.validate()?;
    let (c, d) = (classifier.n_classes(), classifier.dim());
    if dataset.n_classes() != c || dataset.dim() != d {
        return Err(arg(format!(
            "dataset is {}-class {}-dim, classifier is {c}-class {d}-dim",
            dataset.n_classes(),
            dataset.dim()
        )));
    }
    if dataset.is_empty() {
        return Err(arg("cannot train on an empty dataset"));
    }
    let loss = config.build_loss(dataset)?;
    let epoch_len = oversample_epoch(dataset, config.min_count, config.seed).len();
    let steps_per_epoch = epoch_len.div_ceil(config.batch_size);
    let period_steps = config.restart_period * steps_per_epoch;

    let n_params = c * d + c;
    let mut adam = match config.optimizer {
        Optimizer::Adam { .. } => Some(AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }),
        Optimizer::Sgd => None,
    };
    let mut grad_params = vec![0.0; n_params];
    let mut logits = vec![0.0; GROUP * c];
    let mut dlogits = vec![0.0; GROUP * c];
    let mut feats = vec![0.0; GROUP * d];
    let mut history = TrainHistory {
        epoch_losses: Vec::with_capacity(config.epochs),
        epoch_lrs: Vec::with_capacity(config.epochs),
        steps_per_epoch,
        total_steps: 0,
    };
    let gamma = classifier.gamma();
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let order = oversample_epoch(dataset, config.min_count, config.seed.wrapping_add(epoch as u64 + 1));
        history.epoch_lrs.push(lr_at(config.base_lr, period_steps, step));
        let mut epoch_loss = 0.0;
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            grad_params.iter_mut().for_each(|g| *g = 0.0);
            let mut batch_loss = 0.0;
            // Samples are processed in groups of GROUP so each weight row is
            // loaded once per group in both the forward and backward pass.
            for group in chunk.chunks(GROUP) {
                let n = group.len();
                for (j, &idx) in group.iter().enumerate() {
                    feats[j * d..(j + 1) * d].copy_from_slice(&dataset.sample(idx).features);
                }
                group_logits(classifier, &feats[..n * d], n, &mut logits[..n * c]);
                for (j, &idx) in group.iter().enumerate() {
                    let row = &logits[j * c..(j + 1) * c];
                    if let Some(bad) = row.iter().find(|v| !v.is_finite()) {
                        return Err(Error::Divergence {
                            epoch,
                            batch,
                            reason: format!("non-finite logit {bad} on sample {idx}"),
                        });
                    }
                    let labels = &dataset.sample(idx).labels;
                    batch_loss += loss.evaluate_into(row, labels, &mut dlogits[j * c..(j + 1) * c])?;
                }
                let (gw, gb) = grad_params.split_at_mut(c * d);
                accumulate_group(gw, gb, &feats[..n * d], &dlogits[..n * c], n, c, d, gamma);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch,
                    reason: format!("batch loss {batch_loss}"),
                });
            }
            epoch_loss += batch_loss;
            let inv = 1.0 / chunk.len() as f64;
            grad_params.iter_mut().for_each(|g| *g *= inv);

            let lr = lr_at(config.base_lr, period_steps, step);
            apply_update(config.optimizer, adam.as_mut(), classifier, &grad_params, lr);
            step += 1;
        }
        history.epoch_losses.push(epoch_loss / order.len() as f64);
    }
    history.total_steps = step;
    Ok(history)
}

const GROUP: usize = 4;

/// Logits of `n ≤ GROUP` samples stored row-major in `feats`; `out` is n×C.
fn group_logits(clf: &LinearClassifier, feats: &[f64], n: usize, out: &mut [f64]) {
    let (c, d, gamma) = (clf.n_classes(), clf.dim(), clf.gamma());
    let (w, b) = (clf.weights(), clf.bias());
    if n < GROUP {
        for j in 0..n {
            for i in 0..c {
                out[j * c + i] = gamma * dot(&feats[j * d..(j + 1) * d], &w[i * d..(i + 1) * d]) + b[i];
            }
        }
        return;
    }
    let (x0, rest) = feats.split_at(d);
    let (x1, rest) = rest.split_at(d);
    let (x2, x3) = rest.split_at(d);
    for i in 0..c {
        let wi = &w[i * d..(i + 1) * d];
        let (mut a0, mut a1, mut a2, mut a3) = ([0.0f64; 4], [0.0f64; 4], [0.0f64; 4], [0.0f64; 4]);
        let mut k = 0;
        while k + 4 <= d {
            for l in 0..4 {
                let wv = wi[k + l];
                a0[l] += wv * x0[k + l];
                a1[l] += wv * x1[k + l];
                a2[l] += wv * x2[k + l];
                a3[l] += wv * x3[k + l];
            }
            k += 4;
        }
        let mut t = [0.0f64; 4];
        for (kk, &wv) in wi.iter().enumerate().skip(k) {
            t[0] += wv * x0[kk];
            t[1] += wv * x1[kk];
            t[2] += wv * x2[kk];
            t[3] += wv * x3[kk];
        }
        for (j, a) in [a0, a1, a2, a3].iter().enumerate() {
            let s = (a[0] + a[2]) + (a[1] + a[3]) + t[j];
            out[j * c + i] = gamma * s + b[i];
        }
    }
}

/// gW_i += Σ_j g_ji·γ·x_j and gb_i += Σ_j g_ji over a group of samples.
#[allow(clippy::too_many_arguments)]
fn accumulate_group(
    gw: &mut [f64],
    gb: &mut [f64],
    feats: &[f64],
    dlogits: &[f64],
    n: usize,
    c: usize,
    d: usize,
    gamma: f64,
) {
    let mut scale = [0.0f64; GROUP];
    for i in 0..c {
        let mut any = false;
        for j in 0..n {
            let g = dlogits[j * c + i];
            gb[i] += g;
            scale[j] = g * gamma;
            any |= g != 0.0;
        }
        if !any {
            continue;
        }
        let row = &mut gw[i * d..(i + 1) * d];
        if n == GROUP {
            let (x0, rest) = feats.split_at(d);
            let (x1, rest) = rest.split_at(d);
            let (x2, x3) = rest.split_at(d);
            for k in 0..d {
                row[k] += scale[0] * x0[k] + scale[1] * x1[k] + scale[2] * x2[k] + scale[3] * x3[k];
            }
        } else {
            for j in 0..n {
                for (w, x) in row.iter_mut().zip(&feats[j * d..(j + 1) * d]) {
                    *w += scale[j] * x;
                }
            }
        }
    }
}

fn apply_update(
    optimizer: Optimizer,
    state: Option<&mut AdamState>,
    classifier: &mut LinearClassifier,
    grad: &[f64],
    lr: f64,
) {
    let n_w = classifier.weights().len();
    let (w, b) = classifier.params_mut();
    let params = w.iter_mut().chain(b.iter_mut());
    match (optimizer, state) {
        (Optimizer::Adam { beta1, beta2, eps }, Some(st)) => {
            st.t += 1;
            let c1 = 1.0 - beta1.powi(st.t);
            let c2 = 1.0 - beta2.powi(st.t);
            for (k, p) in params.enumerate() {
                let g = grad[k];
                st.m[k] = beta1 * st.m[k] + (1.0 - beta1) * g;
                st.v[k] = beta2 * st.v[k] + (1.0 - beta2) * g * g;
                let m_hat = st.m[k] / c1;
                let v_hat = st.v[k] / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        _ => {
            for (p, g) in params.zip(grad) {
                *p -= lr * g;
            }
        }
    }
    debug_assert_eq!(grad.len(), n_w + classifier.n_classes());
}

/// Logits for every sample, in dataset order.
pub fn score_dataset(classifier: &LinearClassifier, dataset: &Dataset) -> Result<ScoreMatrix> {
    let c = classifier.n_classes();
    let mut data = vec![0.0; dataset.len() * c];
    for (row, s) in data.chunks_exact_mut(c).zip(dataset.samples()) {
        classifier.forward_into(&s.features, row)?;
    }
    ScoreMatrix::new(c, data)
}
