//! Per-class semantic vectors used to initialize the classifier.
//!
//! Tables come either from the compositional generator (a desk-scale
//! stand-in for sentence embeddings of class prompts) or from an external
//! text file.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::BufRead;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{arg, format_err, Error, Result};
use crate::linalg::{norm, normalize_in_place, seeded_rng};
use crate::taxonomy::Taxonomy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Synthetic,
    External,
}

/// `rows × dim` matrix of unit-norm class vectors, row `i` for class `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    data: Vec<f64>,
    provenance: Provenance,
}

impl EmbeddingTable {
    /// Wraps raw rows without normalizing them. Rejects ragged or
    /// non-finite input.
    pub fn from_rows(rows: Vec<Vec<f64>>, provenance: Provenance) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if dim == 0 {
            return Err(arg("embedding table needs at least one non-empty row"));
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(arg(format!("row {i} has {} components, expected {dim}", r.len())));
            }
            if let Some(v) = r.iter().find(|v| !v.is_finite()) {
                return Err(Error::Value(format!("row {i} has non-finite component {v}")));
            }
            data.extend_from_slice(r);
        }
        Ok(EmbeddingTable {
            dim,
            data,
            provenance,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Row-major contents.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Writes the embedding file format: a `C D` header, then one
    /// `label<TAB>v1 v2 … vD` line per class in class-id order. Values use
    /// the shortest representation that round-trips exactly.
    pub fn to_text(&self, taxonomy: &Taxonomy) -> Result<String> {
        if taxonomy.n_classes() != self.n_rows() {
            return Err(arg("taxonomy and table disagree on class count"));
        }
        let mut out = format!("{} {}\n", self.n_rows(), self.dim);
        for (i, row) in self.rows().enumerate() {
            out.push_str(&taxonomy.label(i)?);
            out.push('\t');
            write_reals(&mut out, row);
            out.push('\n');
        }
        Ok(out)
    }
}

pub(crate) fn write_reals(out: &mut String, values: &[f64]) {
    for (j, v) in values.iter().enumerate() {
        if j > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{v:?}");
    }
}

pub(crate) fn parse_reals(line_no: usize, text: &str) -> Result<Vec<f64>> {
    text.split_ascii_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|_| format_err(line_no, format!("cannot parse {tok:?} as a real")))
        })
        .collect()
}

/// Parameters of the compositional generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompositionalParams {
    pub dim: usize,
    pub noise_scale: f64,
    pub verb_weight: f64,
    pub object_weight: f64,
}

impl Default for CompositionalParams {
    fn default() -> Self {
        CompositionalParams {
            dim: 64,
            noise_scale: 0.1,
            verb_weight: 1.0,
            object_weight: 1.0,
        }
    }
}

fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if normalize_in_place(&mut v) > 1e-12 {
            return v;
        }
    }
}

/// Class embedding is
/// `normalize(verb_weight·u_verb + object_weight·u_object + noise_scale·ε)`
/// with independent isotropic unit directions per verb and object, and
/// ε ~ N(0, I).
pub fn compositional_embeddings_with(
    taxonomy: &Taxonomy,
    params: &CompositionalParams,
    seed: u64,
) -> Result<EmbeddingTable> {
    let dim = params.dim;
    if dim < 2 {
        return Err(arg(format!("embedding dimension must be ≥ 2, got {dim}")));
    }
    if !(params.noise_scale >= 0.0 && params.noise_scale.is_finite()) {
        return Err(arg("noise_scale must be a finite non-negative real"));
    }
    let mut rng = seeded_rng(seed, 0xe3b);
    let verbs: Vec<Vec<f64>> = (0..taxonomy.n_verbs()).map(|_| random_unit(&mut rng, dim)).collect();
    let objects: Vec<Vec<f64>> = (0..taxonomy.n_objects())
        .map(|_| random_unit(&mut rng, dim))
        .collect();
    let mut data = Vec::with_capacity(taxonomy.n_classes() * dim);
    for c in taxonomy.classes() {
        let (v, o) = (&verbs[c.verb_id], &objects[c.object_id]);
        let mut row: Vec<f64> = (0..dim)
            .map(|j| params.verb_weight * v[j] + params.object_weight * o[j])
            .collect();
        if params.noise_scale > 0.0 {
            for x in row.iter_mut() {
                let e: f64 = rng.sample(StandardNormal);
                *x += params.noise_scale * e;
            }
        }
        if normalize_in_place(&mut row) == 0.0 {
            return Err(Error::Value(format!(
                "class {} has a zero compositional vector",
                c.class_id
            )));
        }
        data.extend(row);
    }
    Ok(EmbeddingTable {
        dim,
        data,
        provenance: Provenance::Synthetic,
    })
}

/// Compositional embeddings with equal verb and object weights.
pub fn compositional_embeddings(
    taxonomy: &Taxonomy,
    dim: usize,
    noise_scale: f64,
    seed: u64,
) -> Result<EmbeddingTable> {
    compositional_embeddings_with(
        taxonomy,
        &CompositionalParams {
            dim,
            noise_scale,
            ..Default::default()
        },
        seed,
    )
}

/// Reads an embedding file. Rows are reordered to taxonomy class order.
pub fn load_embeddings<R: BufRead>(
    source: R,
    taxonomy: &Taxonomy,
    normalize: bool,
) -> Result<EmbeddingTable> {
    let mut lines = source.lines();
    let header = lines.next().ok_or_else(|| format_err(1, "missing header"))??;
    let header: Vec<&str> = header.split_ascii_whitespace().collect();
    let (n_rows, dim) = match header.as_slice() {
        [c, d] => (
            c.parse::<usize>().map_err(|_| format_err(1, "bad class count"))?,
            d.parse::<usize>().map_err(|_| format_err(1, "bad dimension"))?,
        ),
        _ => return Err(format_err(1, "header must be `C D`")),
    };
    if dim == 0 {
        return Err(format_err(1, "dimension must be positive"));
    }

    let index: HashMap<String, usize> = taxonomy
        .labels()
        .into_iter()
        .enumerate()
        .map(|(i, l)| (l, i))
        .collect();
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; taxonomy.n_classes()];
    let mut seen = 0usize;
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (label, values) = line
            .split_once('\t')
            .ok_or_else(|| format_err(line_no, "expected `label<TAB>values`"))?;
        let values = parse_reals(line_no, values)?;
        if values.len() != dim {
            return Err(format_err(
                line_no,
                format!("row has {} components, header declares {dim}", values.len()),
            ));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Value(format!("line {line_no}: non-finite component {v}")));
        }
        let class_id = *index
            .get(label)
            .ok_or_else(|| Error::Coverage(format!("label {label:?} is not in the taxonomy")))?;
        if rows[class_id].replace(values).is_some() {
            return Err(Error::Coverage(format!("label {label:?} appears twice")));
        }
        seen += 1;
    }
    if seen != n_rows {
        return Err(format_err(
            1,
            format!("header declares {n_rows} rows, found {seen}"),
        ));
    }
    let missing: Vec<String> = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.is_none())
        .map(|(i, _)| taxonomy.label(i).expect("dense ids"))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Coverage(format!(
            "{} taxonomy classes missing from file, first {:?}",
            missing.len(),
            missing[0]
        )));
    }
    let table = EmbeddingTable {
        dim,
        data: rows.into_iter().flatten().flatten().collect(),
        provenance: Provenance::External,
    };
    if normalize {
        normalize_rows(&table)
    } else {
        Ok(table)
    }
}

/// Divides each row by its Euclidean norm.
pub fn normalize_rows(table: &EmbeddingTable) -> Result<EmbeddingTable> {
    let mut out = table.clone();
    for (i, row) in out.data.chunks_exact_mut(out.dim).enumerate() {
        let n = norm(row);
        if n == 0.0 {
            return Err(Error::Value(format!("row {i} has zero norm")));
        }
        if n != 1.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    Ok(out)
}
