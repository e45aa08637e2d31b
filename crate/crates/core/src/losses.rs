//! Multi-label losses over scaled logits with closed-form gradients.
//!
//! The LSE-Sign loss is `L = log(1 + Σ_i exp(−y_i s_i))`; its gradient
//! `∂L/∂s_i = −y_i exp(−y_i s_i) / (1 + Σ_j exp(−y_j s_j))` is a softmax over
//! all classes plus an implicit zero logit, so gradient magnitudes are shared
//! across classes instead of computed per class.
//!
//! The baselines (BCE, weighted BCE, focal) are mean-reduced over classes.
//! Every evaluation is routed through log-sigmoid or max-shifted forms and
//! stays finite for logits up to ±1e4.

use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::linalg::{sigmoid, softplus};

/// Labels in {+1, −1}, one per class.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SignLabels {
    signs: Vec<i8>,
}

impl SignLabels {
    pub fn from_signs(signs: &[i8]) -> Result<Self> {
        if let Some(bad) = signs.iter().find(|&&s| s != 1 && s != -1) {
            return Err(arg(format!("sign labels must be ±1, got {bad}")));
        }
        Ok(SignLabels {
            signs: signs.to_vec(),
        })
    }

    /// +1 on `positives`, −1 elsewhere.
    pub fn from_positives(n_classes: usize, positives: &[usize]) -> Result<Self> {
        let mut signs = vec![-1i8; n_classes];
        for &p in positives {
            *signs.get_mut(p).ok_or(Error::Index {
                what: "classes",
                index: p,
                len: n_classes,
            })? = 1;
        }
        Ok(SignLabels { signs })
    }

    pub fn len(&self) -> usize {
        self.signs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signs.is_empty()
    }

    #[inline]
    pub fn sign(&self, i: usize) -> f64 {
        f64::from(self.signs[i])
    }

    #[inline]
    pub fn is_positive(&self, i: usize) -> bool {
        self.signs[i] > 0
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.signs
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.signs
            .iter()
            .enumerate()
            .filter(|(_, &s)| s > 0)
            .map(|(i, _)| i)
    }

    pub fn n_positives(&self) -> usize {
        self.signs.iter().filter(|&&s| s > 0).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    /// ∂L/∂s, one entry per class.
    pub grad: Vec<f64>,
}

/// `log(1 + Σ exp(z_i))`, shifted by `m = max(0, max z_i)` so the implicit
/// zero term takes part in the max.
pub fn stable_log1p_sum_exp(z: &[f64]) -> Result<f64> {
    if let Some(v) = z.iter().find(|v| !v.is_finite()) {
        return Err(Error::Value(format!("non-finite input {v}")));
    }
    Ok(log1p_sum_exp_shifted(z, |_| {}))
}

/// Shared kernel: returns the value and calls `visit(denominator)` after
/// the shifted sum, where the denominator is `exp(−m) + Σ exp(z_i − m)`.
#[inline]
fn log1p_sum_exp_shifted(z: &[f64], visit: impl FnOnce((f64, f64))) -> f64 {
    let m = z.iter().copied().fold(0.0f64, f64::max);
    let tail: f64 = z.iter().map(|&v| (v - m).exp()).sum();
    if m == 0.0 {
        // No shift: ln_1p keeps the value strictly positive for tiny sums.
        visit((m, 1.0 + tail));
        tail.ln_1p()
    } else {
        let denom = (-m).exp() + tail;
        visit((m, denom));
        m + denom.ln()
    }
}

fn check_lengths(s: &[f64], y: &SignLabels) -> Result<()> {
    if s.len() != y.len() {
        return Err(arg(format!(
            "logits have {} entries, labels have {}",
            s.len(),
            y.len()
        )));
    }
    if s.is_empty() {
        return Err(arg("loss needs at least one class"));
    }
    Ok(())
}

pub fn lse_sign_loss(s: &[f64], y: &SignLabels) -> Result<LossResult> {
    check_lengths(s, y)?;
    let mut grad = vec![0.0; s.len()];
    let value = lse_sign_into(s, y, &mut grad);
    Ok(LossResult { value, grad })
}

fn lse_sign_into(s: &[f64], y: &SignLabels, grad: &mut [f64]) -> f64 {
    for (i, (g, &si)) in grad.iter_mut().zip(s).enumerate() {
        *g = -y.sign(i) * si;
    }
    let mut shift = (0.0, 1.0);
    let value = log1p_sum_exp_shifted(grad, |d| shift = d);
    let (m, denom) = shift;
    for (i, g) in grad.iter_mut().enumerate() {
        *g = -y.sign(i) * (*g - m).exp() / denom;
    }
    value
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    LseSign,
    Bce,
    WeightedBce,
    Focal,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::LseSign => "lse_sign",
            LossKind::Bce => "bce",
            LossKind::WeightedBce => "weighted_bce",
            LossKind::Focal => "focal",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "lse_sign" => Ok(LossKind::LseSign),
            "bce" => Ok(LossKind::Bce),
            "weighted_bce" => Ok(LossKind::WeightedBce),
            "focal" => Ok(LossKind::Focal),
            other => Err(arg(format!("unknown loss kind {other:?}"))),
        }
    }
}

pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;

/// Hyper-parameters of the baseline losses.
#[derive(Debug, Clone, PartialEq)]
pub struct LossParams {
    /// Per-class multiplier on the positive BCE term.
    pub pos_weights: Option<Vec<f64>>,
    pub focal_gamma: f64,
    pub alpha: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            pos_weights: None,
            focal_gamma: FOCAL_GAMMA,
            alpha: FOCAL_ALPHA,
        }
    }
}

/// A fully parameterized loss, ready for repeated evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum Loss {
    LseSign,
    Bce,
    WeightedBce { pos_weights: Vec<f64> },
    Focal { gamma: f64, alpha: f64 },
}

impl Loss {
    pub fn new(kind: LossKind, params: &LossParams) -> Result<Self> {
        Ok(match kind {
            LossKind::LseSign => Loss::LseSign,
            LossKind::Bce => Loss::Bce,
            LossKind::WeightedBce => {
                let w = params
                    .pos_weights
                    .clone()
                    .ok_or_else(|| arg("weighted_bce requires per-class positive weights"))?;
                if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                    return Err(arg("positive weights must be finite and > 0"));
                }
                Loss::WeightedBce { pos_weights: w }
            }
            LossKind::Focal => {
                if !(params.focal_gamma >= 0.0 && (0.0..=1.0).contains(&params.alpha)) {
                    return Err(arg("focal loss needs gamma ≥ 0 and alpha ∈ [0, 1]"));
                }
                Loss::Focal {
                    gamma: params.focal_gamma,
                    alpha: params.alpha,
                }
            }
        })
    }

    pub fn kind(&self) -> LossKind {
        match self {
            Loss::LseSign => LossKind::LseSign,
            Loss::Bce => LossKind::Bce,
            Loss::WeightedBce { .. } => LossKind::WeightedBce,
            Loss::Focal { .. } => LossKind::Focal,
        }
    }

    pub fn evaluate(&self, s: &[f64], y: &SignLabels) -> Result<LossResult> {
        let mut grad = vec![0.0; s.len()];
        let value = self.evaluate_into(s, y, &mut grad)?;
        Ok(LossResult { value, grad })
    }

    /// Writes ∂L/∂s into `grad` and returns L.
    pub fn evaluate_into(&self, s: &[f64], y: &SignLabels, grad: &mut [f64]) -> Result<f64> {
        check_lengths(s, y)?;
        if grad.len() != s.len() {
            return Err(arg("gradient buffer length must equal C"));
        }
        let n = s.len() as f64;
        let value = match self {
            Loss::LseSign => lse_sign_into(s, y, grad),
            Loss::Bce => {
                let mut total = 0.0;
                for i in 0..s.len() {
                    let (l, g) = bce_term(s[i], y.is_positive(i), 1.0);
                    total += l;
                    grad[i] = g / n;
                }
                total / n
            }
            Loss::WeightedBce { pos_weights } => {
                if pos_weights.len() != s.len() {
                    return Err(arg(format!(
                        "{} positive weights for {} classes",
                        pos_weights.len(),
                        s.len()
                    )));
                }
                let mut total = 0.0;
                for i in 0..s.len() {
                    let (l, g) = bce_term(s[i], y.is_positive(i), pos_weights[i]);
                    total += l;
                    grad[i] = g / n;
                }
                total / n
            }
            Loss::Focal { gamma, alpha } => {
                let mut total = 0.0;
                for i in 0..s.len() {
                    let (l, g) = focal_term(s[i], y.is_positive(i), *gamma, *alpha);
                    total += l;
                    grad[i] = g / n;
                }
                total / n
            }
        };
        Ok(value)
    }
}

/// One class of (weighted) BCE: positive term `w·softplus(−s)`, negative
/// term `softplus(s)`. Returns (loss, ∂loss/∂s).
#[inline]
fn bce_term(s: f64, positive: bool, pos_weight: f64) -> (f64, f64) {
    if positive {
        (pos_weight * softplus(-s), -pos_weight * sigmoid(-s))
    } else {
        (softplus(s), sigmoid(s))
    }
}

/// One class of focal loss written in terms of the margin `z = ±s`:
/// `ℓ = α_t · q^γ · softplus(−z)` with `q = σ(−z) = 1 − p_t`, so
/// `dℓ/dz = −α_t q^γ (γ(1 − q)·softplus(−z) + q)`.
#[inline]
fn focal_term(s: f64, positive: bool, gamma: f64, alpha: f64) -> (f64, f64) {
    let (z, alpha_t, dz) = if positive {
        (s, alpha, 1.0)
    } else {
        (-s, 1.0 - alpha, -1.0)
    };
    let q = sigmoid(-z);
    let nll = softplus(-z);
    let qg = q.powf(gamma);
    let value = alpha_t * qg * nll;
    let dldz = -alpha_t * qg * (gamma * (1.0 - q) * nll + q);
    (value, dldz * dz)
}

pub fn baseline_loss(
    kind: LossKind,
    params: &LossParams,
    s: &[f64],
    y: &SignLabels,
) -> Result<LossResult> {
    Loss::new(kind, params)?.evaluate(s, y)
}

/// Per-class positive weights `clamp(neg/pos, 1, 1000)` from positive
/// counts over `n_samples`; classes with no positives get weight 1.
pub fn positive_weights(pos_counts: &[usize], n_samples: usize) -> Vec<f64> {
    pos_counts
        .iter()
        .map(|&p| {
            if p == 0 {
                1.0
            } else {
                let neg = n_samples.saturating_sub(p) as f64;
                (neg / p as f64).clamp(1.0, 1000.0)
            }
        })
        .collect()
}
