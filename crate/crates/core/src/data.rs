//! Synthetic long-tailed multi-label data and the class-balancing
//! oversampler.
//!
//! Class popularity follows a Zipf law over a seeded random ranking of the
//! classes. Each sample draws a primary class by popularity and may add
//! co-occurring classes that share the primary's object (several
//! interactions with one carrot, say). Features are noisy normalized sums of
//! the positive classes' embeddings, so the label geometry mirrors the
//! embedding geometry.

use std::fmt::Write as _;
use std::io::BufRead;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embeddings::{parse_reals, write_reals, EmbeddingTable};
use crate::error::{arg, format_err, Error, Result};
use crate::linalg::{normalize_in_place, seeded_rng};
use crate::losses::SignLabels;
use crate::taxonomy::Taxonomy;

/// Full-dataset size the per-class minimum of 40 was calibrated against.
pub const REFERENCE_DATASET_SIZE: usize = 38116;
pub const REFERENCE_MIN_COUNT: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub n_samples: usize,
    pub zipf_exponent: f64,
    /// Upper bound on positive labels per sample.
    pub cooccur_max: usize,
    /// Chance that each extra co-occurrence slot is filled.
    pub cooccur_prob: f64,
    pub feature_noise: f64,
    pub dim: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_samples: 30000,
            zipf_exponent: 1.0,
            cooccur_max: 3,
            cooccur_prob: 0.5,
            feature_noise: 0.3,
            dim: 64,
        }
    }
}

impl DatasetSpec {
    fn validate(&self) -> Result<()> {
        if self.cooccur_max == 0 {
            return Err(arg("cooccur_max must be ≥ 1"));
        }
        if !(self.zipf_exponent > 0.0 && self.zipf_exponent.is_finite()) {
            return Err(arg("zipf_exponent must be positive"));
        }
        if !(0.0..=1.0).contains(&self.cooccur_prob) {
            return Err(arg("cooccur_prob must lie in [0, 1]"));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return Err(arg("feature_noise must be non-negative"));
        }
        Ok(())
    }

    /// Per-class minimum scaled to this dataset's size, floored at 4.
    pub fn scaled_min_count(&self) -> usize {
        let scaled = REFERENCE_MIN_COUNT as f64 * self.n_samples as f64 / REFERENCE_DATASET_SIZE as f64;
        (scaled.floor() as usize).max(4)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub labels: SignLabels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    n_classes: usize,
    samples: Vec<Sample>,
    train_counts: Vec<usize>,
}

impl Dataset {
    pub fn new(n_classes: usize, dim: usize, samples: Vec<Sample>) -> Result<Self> {
        if n_classes == 0 || dim == 0 {
            return Err(arg("dataset needs C ≥ 1 and D ≥ 1"));
        }
        let mut counts = vec![0usize; n_classes];
        for (k, s) in samples.iter().enumerate() {
            if s.features.len() != dim || s.labels.len() != n_classes {
                return Err(arg(format!("sample {k} has inconsistent shape")));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Value(format!("sample {k} has non-finite features")));
            }
            let mut any = false;
            for p in s.labels.positives() {
                counts[p] += 1;
                any = true;
            }
            if !any {
                return Err(arg(format!("sample {k} has no positive label")));
            }
        }
        Ok(Dataset {
            dim,
            n_classes,
            samples,
            train_counts: counts,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    /// Positive count per class.
    pub fn train_counts(&self) -> &[usize] {
        &self.train_counts
    }

    /// Header `N C D`, then per sample one line of features and one line
    /// of positive class ids.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {} {}\n", self.len(), self.n_classes, self.dim);
        for s in &self.samples {
            write_reals(&mut out, &s.features);
            out.push('\n');
            for (j, p) in s.labels.positives().enumerate() {
                if j > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{p}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines.next().ok_or_else(|| format_err(1, "missing header"))??;
        let fields: Vec<usize> = header
            .split_ascii_whitespace()
            .map(|t| t.parse().map_err(|_| format_err(1, "header must be `N C D`")))
            .collect::<Result<_>>()?;
        let [n, c, d] = fields[..] else {
            return Err(format_err(1, "header must be `N C D`"));
        };
        let mut samples = Vec::with_capacity(n);
        for k in 0..n {
            let feat_line = 2 + 2 * k;
            let features = lines
                .next()
                .ok_or_else(|| format_err(feat_line, "truncated dataset"))??;
            let features = parse_reals(feat_line, &features)?;
            if features.len() != d {
                return Err(format_err(feat_line, format!("expected {d} features")));
            }
            let ids = lines
                .next()
                .ok_or_else(|| format_err(feat_line + 1, "truncated dataset"))??;
            let ids: Vec<usize> = ids
                .split_ascii_whitespace()
                .map(|t| {
                    t.parse()
                        .map_err(|_| format_err(feat_line + 1, format!("bad class id {t:?}")))
                })
                .collect::<Result<_>>()?;
            let labels = SignLabels::from_positives(c, &ids)?;
            samples.push(Sample { features, labels });
        }
        Dataset::new(c, d, samples)
    }
}

/// Seeded sampler; successive `draw` calls share one popularity ranking,
/// which is how train and test splits of one task are produced.
pub struct LongTailSampler<'a> {
    spec: DatasetSpec,
    taxonomy: &'a Taxonomy,
    embeddings: &'a EmbeddingTable,
    popularity: Vec<f64>,
    rank_order: Vec<usize>,
    primary: WeightedIndex<f64>,
    same_object: Vec<Vec<usize>>,
    rng: ChaCha8Rng,
}

impl<'a> LongTailSampler<'a> {
    pub fn new(
        spec: &DatasetSpec,
        taxonomy: &'a Taxonomy,
        embeddings: &'a EmbeddingTable,
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        let c = taxonomy.n_classes();
        if embeddings.n_rows() != c {
            return Err(arg(format!(
                "embedding table has {} rows, taxonomy has {c} classes",
                embeddings.n_rows()
            )));
        }
        if embeddings.dim() != spec.dim {
            return Err(arg(format!(
                "spec dim {} differs from embedding dim {}",
                spec.dim,
                embeddings.dim()
            )));
        }
        let mut rng = seeded_rng(seed, 0xda7a);
        let mut rank_order: Vec<usize> = (0..c).collect();
        rank_order.shuffle(&mut rng);
        let mut popularity = vec![0.0; c];
        for (r, &class) in rank_order.iter().enumerate() {
            popularity[class] = ((r + 1) as f64).powf(-spec.zipf_exponent);
        }
        let primary = WeightedIndex::new(&popularity).map_err(|e| arg(e.to_string()))?;
        let same_object = (0..taxonomy.n_objects())
            .map(|o| taxonomy.classes_with_object(o))
            .collect();
        Ok(LongTailSampler {
            spec: *spec,
            taxonomy,
            embeddings,
            popularity,
            rank_order,
            primary,
            same_object,
            rng,
        })
    }

    /// `rank_order()[r]` is the class at popularity rank `r + 1`.
    pub fn rank_order(&self) -> &[usize] {
        &self.rank_order
    }

    /// Unnormalized popularity weight of each class.
    pub fn popularity(&self) -> &[f64] {
        &self.popularity
    }

    fn draw_labels(&mut self) -> Vec<usize> {
        let first = self.primary.sample(&mut self.rng);
        let mut positives = vec![first];
        let object = self.taxonomy.classes()[first].object_id;
        for _ in 1..self.spec.cooccur_max {
            if !self.rng.random_bool(self.spec.cooccur_prob) {
                continue;
            }
            let candidates: Vec<usize> = self.same_object[object]
                .iter()
                .copied()
                .filter(|k| !positives.contains(k))
                .collect();
            if candidates.is_empty() {
                break;
            }
            let weights: Vec<f64> = candidates.iter().map(|&k| self.popularity[k]).collect();
            let pick = WeightedIndex::new(&weights).expect("positive weights");
            positives.push(candidates[pick.sample(&mut self.rng)]);
        }
        positives.sort_unstable();
        positives
    }

    fn draw_features(&mut self, positives: &[usize]) -> Vec<f64> {
        let noise = self.spec.feature_noise;
        if noise == 0.0 && positives.len() == 1 {
            return self.embeddings.row(positives[0]).to_vec();
        }
        let mut x = vec![0.0; self.spec.dim];
        for &p in positives {
            for (xi, e) in x.iter_mut().zip(self.embeddings.row(p)) {
                *xi += e;
            }
        }
        if noise > 0.0 {
            for xi in x.iter_mut() {
                let e: f64 = self.rng.sample(StandardNormal);
                *xi += noise * e;
            }
        }
        normalize_in_place(&mut x);
        x
    }

    pub fn draw(&mut self, n_samples: usize) -> Result<Dataset> {
        let c = self.taxonomy.n_classes();
        let mut samples = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let positives = self.draw_labels();
            let features = self.draw_features(&positives);
            let labels = SignLabels::from_positives(c, &positives)?;
            samples.push(Sample { features, labels });
        }
        Dataset::new(c, self.spec.dim, samples)
    }
}

pub fn generate_dataset(
    spec: &DatasetSpec,
    taxonomy: &Taxonomy,
    embeddings: &EmbeddingTable,
    seed: u64,
) -> Result<Dataset> {
    LongTailSampler::new(spec, taxonomy, embeddings, seed)?.draw(spec.n_samples)
}

/// One epoch of sample indices in which every class with at least one
/// positive is seen at least `min_count` times, counting a sample toward
/// each of its positive classes.
///
/// Every index appears once; deficient classes, rarest first, are topped up
/// round-robin over their own samples. The result is shuffled.
pub fn oversample_epoch(dataset: &Dataset, min_count: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if min_count > 0 {
        let c = dataset.n_classes();
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); c];
        for (i, s) in dataset.samples().iter().enumerate() {
            for p in s.labels.positives() {
                members[p].push(i);
            }
        }
        let mut appearances = dataset.train_counts().to_vec();
        let mut classes: Vec<usize> = (0..c).filter(|&k| appearances[k] > 0).collect();
        classes.sort_by_key(|&k| (appearances[k], k));
        for k in classes {
            let pool = &members[k];
            let mut next = 0;
            while appearances[k] < min_count {
                let idx = pool[next % pool.len()];
                next += 1;
                order.push(idx);
                for p in dataset.sample(idx).labels.positives() {
                    appearances[p] += 1;
                }
            }
        }
    }
    order.shuffle(&mut seeded_rng(seed, 0x0e5));
    order
}
