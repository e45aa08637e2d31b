//! Small dense-vector helpers shared by the numeric modules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Inner product with eight independent accumulators so the reduction
/// vectorizes. Summation order is fixed, so results are reproducible.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Scales `a` to unit Euclidean norm and returns the original norm.
/// Leaves `a` untouched when the norm is zero or non-finite.
pub fn normalize_in_place(a: &mut [f64]) -> f64 {
    let n = norm(a);
    if n > 0.0 && n.is_finite() {
        for v in a.iter_mut() {
            *v /= n;
        }
    }
    n
}

/// Deterministic RNG for a (seed, stream) pair. Streams keep independent
/// consumers of one experiment seed from sharing random draws.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid evaluated on whichever branch avoids overflow.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
