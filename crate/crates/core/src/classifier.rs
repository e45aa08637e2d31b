//! Linear classification head with scaled logits `s_i = γ·⟨x, w_i⟩ + b_i`.

use std::io::BufRead;

use rand::distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::embeddings::{parse_reals, write_reals, EmbeddingTable};
use crate::error::{arg, format_err, Error, Result};
use crate::linalg::{dot, seeded_rng};
use crate::taxonomy::Taxonomy;

pub const DEFAULT_GAMMA: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitStrategy {
    /// Rows copied from the class embedding table.
    Embedding,
    /// Xavier-uniform: U(−a, a) with a = √(6/(D+C)), variance 2/(D+C).
    Random,
}

impl InitStrategy {
    pub fn name(self) -> &'static str {
        match self {
            InitStrategy::Embedding => "embedding",
            InitStrategy::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    n_classes: usize,
    dim: usize,
    /// Row-major `C × D`.
    weights: Vec<f64>,
    bias: Vec<f64>,
    gamma: f64,
}

impl LinearClassifier {
    pub fn from_parts(
        n_classes: usize,
        dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        if n_classes == 0 || dim == 0 {
            return Err(arg("classifier needs C ≥ 1 and D ≥ 1"));
        }
        if weights.len() != n_classes * dim || bias.len() != n_classes {
            return Err(arg(format!(
                "expected {n_classes}×{dim} weights and {n_classes} biases, got {} and {}",
                weights.len(),
                bias.len()
            )));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(arg(format!("gamma must be positive and finite, got {gamma}")));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Value("classifier parameters must be finite".into()));
        }
        Ok(LinearClassifier {
            n_classes,
            dim,
            weights,
            bias,
            gamma,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn set_gamma(&mut self, gamma: f64) -> Result<()> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(arg(format!("gamma must be positive and finite, got {gamma}")));
        }
        self.gamma = gamma;
        Ok(())
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.dim..(i + 1) * self.dim]
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub(crate) fn params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.weights, &mut self.bias)
    }

    /// Logits for one feature vector.
    pub fn forward_logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.n_classes];
        self.forward_into(x, &mut out)?;
        Ok(out)
    }

    pub fn forward_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(arg(format!(
                "feature has {} components, classifier expects {}",
                x.len(),
                self.dim
            )));
        }
        if out.len() != self.n_classes {
            return Err(arg("logit buffer length must equal C"));
        }
        for ((o, w), b) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.dim))
            .zip(&self.bias)
        {
            *o = self.gamma * dot(x, w) + b;
        }
        Ok(())
    }

    /// Checkpoint text: `gamma <γ>`, then the embedding-file body
    /// (`C D` header and one labeled row per class), then
    /// `bias<TAB>b1 … bC`.
    pub fn to_text(&self, taxonomy: &Taxonomy) -> Result<String> {
        if taxonomy.n_classes() != self.n_classes {
            return Err(arg("taxonomy and classifier disagree on class count"));
        }
        let mut out = format!("gamma {:?}\n{} {}\n", self.gamma, self.n_classes, self.dim);
        for i in 0..self.n_classes {
            out.push_str(&taxonomy.label(i)?);
            out.push('\t');
            write_reals(&mut out, self.row(i));
            out.push('\n');
        }
        out.push_str("bias\t");
        write_reals(&mut out, &self.bias);
        out.push('\n');
        Ok(out)
    }

    pub fn from_text<R: BufRead>(reader: R, taxonomy: &Taxonomy) -> Result<Self> {
        let lines: Vec<String> = reader.lines().collect::<Result<_, _>>()?;
        let gamma = lines
            .first()
            .and_then(|l| l.strip_prefix("gamma "))
            .ok_or_else(|| format_err(1, "expected `gamma <value>`"))?
            .trim()
            .parse::<f64>()
            .map_err(|_| format_err(1, "bad gamma"))?;
        let bias_pos = lines
            .iter()
            .rposition(|l| l.starts_with("bias\t"))
            .ok_or_else(|| format_err(lines.len(), "missing bias line"))?;
        let body = lines[1..bias_pos].join("\n");
        let table = crate::embeddings::load_embeddings(body.as_bytes(), taxonomy, false)
            .map_err(|e| match e {
                Error::Format { line, reason } => Error::Format {
                    line: line + 1,
                    reason,
                },
                other => other,
            })?;
        let bias = parse_reals(bias_pos + 1, &lines[bias_pos]["bias\t".len()..])?;
        LinearClassifier::from_parts(
            table.n_rows(),
            table.dim(),
            table.as_slice().to_vec(),
            bias,
            gamma,
        )
    }
}

pub fn init_classifier(
    n_classes: usize,
    dim: usize,
    strategy: InitStrategy,
    embeddings: Option<&EmbeddingTable>,
    gamma: f64,
    seed: u64,
) -> Result<LinearClassifier> {
    if n_classes == 0 || dim == 0 {
        return Err(arg("classifier needs C ≥ 1 and D ≥ 1"));
    }
    let weights = match strategy {
        InitStrategy::Embedding => {
            let table = embeddings.ok_or_else(|| arg("embedding init requires an embedding table"))?;
            if table.n_rows() != n_classes || table.dim() != dim {
                return Err(arg(format!(
                    "embedding table is {}×{}, classifier is {n_classes}×{dim}",
                    table.n_rows(),
                    table.dim()
                )));
            }
            table.as_slice().to_vec()
        }
        InitStrategy::Random => {
            let bound = (6.0 / (dim + n_classes) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let mut rng = seeded_rng(seed, 0xc1a);
            (0..n_classes * dim).map(|_| dist.sample(&mut rng)).collect()
        }
    };
    LinearClassifier::from_parts(n_classes, dim, weights, vec![0.0; n_classes], gamma)
}
