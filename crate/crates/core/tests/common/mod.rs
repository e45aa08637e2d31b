//! Independent reference implementations used by the integration and
//! acceptance tests. None of these share code with the library.
#![allow(dead_code)]

use hoi_core::losses::{Loss, LossKind, LossParams, SignLabels};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One random loss instance: logits in [−bound, bound] and random signs
/// with at least one positive.
pub fn random_instance(rng: &mut ChaCha8Rng, max_c: usize, bound: f64) -> (Vec<f64>, SignLabels) {
    let c = rng.random_range(1..=max_c);
    let s: Vec<f64> = (0..c).map(|_| rng.random_range(-bound..=bound)).collect();
    let mut signs: Vec<i8> = (0..c).map(|_| if rng.random_bool(0.3) { 1 } else { -1 }).collect();
    if !signs.contains(&1) {
        let k = rng.random_range(0..c);
        signs[k] = 1;
    }
    (s, SignLabels::from_signs(&signs).unwrap())
}

pub fn all_losses(c: usize, rng: &mut ChaCha8Rng) -> Vec<Loss> {
    let weights: Vec<f64> = (0..c).map(|_| rng.random_range(1.0..50.0)).collect();
    let params = LossParams {
        pos_weights: Some(weights),
        ..LossParams::default()
    };
    [LossKind::LseSign, LossKind::Bce, LossKind::WeightedBce, LossKind::Focal]
        .into_iter()
        .map(|k| Loss::new(k, &params).unwrap())
        .collect()
}

/// Central finite-difference gradient of `f` at `s` with step `h`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, s: &[f64], h: f64) -> Vec<f64> {
    let mut x = s.to_vec();
    (0..s.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest component error, each normalized by max(|an_i|, |fd_i|, ‖an‖∞).
pub fn fd_relative_error(analytic: &[f64], fd: &[f64]) -> f64 {
    let scale_all = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(fd)
        .map(|(&a, &f)| {
            let scale = a.abs().max(f.abs()).max(scale_all);
            if scale == 0.0 {
                0.0
            } else {
                (a - f).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

/// Direct, unshifted LSE-Sign; only valid while exponents stay modest.
pub fn naive_lse_sign(s: &[f64], y: &[i8]) -> f64 {
    let sum: f64 = s.iter().zip(y).map(|(&v, &t)| (-(t as f64) * v).exp()).sum();
    sum.ln_1p()
}

/// O(n²) average precision: rank of item k is 1 + the number of items
/// strictly ahead of it (higher score, or equal score and smaller index).
pub fn brute_force_ap(scores: &[f64], positives: &[bool]) -> Option<f64> {
    let n = scores.len();
    let ahead = |j: usize, k: usize| scores[j] > scores[k] || (scores[j] == scores[k] && j < k);
    let n_pos = positives.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return None;
    }
    let mut total = 0.0;
    for k in (0..n).filter(|&k| positives[k]) {
        let rank = 1 + (0..n).filter(|&j| j != k && ahead(j, k)).count();
        let hits = 1 + (0..n).filter(|&j| j != k && positives[j] && ahead(j, k)).count();
        total += hits as f64 / rank as f64;
    }
    Some(total / n_pos as f64)
}

/// Softmax of `logits` restricted to `allowed`, zero elsewhere.
pub fn restricted_softmax(logits: &[f64], allowed: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .zip(allowed)
        .map(|(&l, &a)| if a { (l - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Per-class appearance counts of an index sequence, counting each sample
/// toward all of its positive classes.
pub fn appearance_counts(order: &[usize], labels: &[Vec<usize>], n_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; n_classes];
    for &i in order {
        for &k in &labels[i] {
            counts[k] += 1;
        }
    }
    counts
}
