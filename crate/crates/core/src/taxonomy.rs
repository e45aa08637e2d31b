//! Compositional verb × object class structure.
//!
//! Every HOI class is a ⟨verb, object⟩ pair. Classes sharing a verb or an
//! object are semantically related, which is the structure the embedding
//! initializer and the co-occurrence generator both exploit.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::io::BufRead;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{arg, format_err, Error, Result};
use crate::linalg::seeded_rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verb {
    pub id: usize,
    pub base: String,
    /// Stored, never derived by morphology rules.
    pub gerund: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Object {
    pub id: usize,
    pub noun: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HoiClass {
    pub class_id: usize,
    pub verb_id: usize,
    pub object_id: usize,
}

/// How [`build_taxonomy`] chooses which verb-object pairs become classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    /// `n_classes` distinct pairs drawn uniformly without replacement.
    UniformRandom,
    /// Every verb paired with every object.
    FullCrossProduct,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    verbs: Vec<Verb>,
    objects: Vec<Object>,
    classes: Vec<HoiClass>,
}

fn check_name(kind: &str, name: &str) -> Result<()> {
    if name.is_empty() || name.chars().any(|c| c.is_whitespace() || c == ':') {
        return Err(arg(format!(
            "{kind} name {name:?} must be non-empty without whitespace or ':'"
        )));
    }
    Ok(())
}

impl Taxonomy {
    /// Builds a taxonomy from explicit names. `verbs` holds
    /// `(base, gerund)` pairs; `pairs` holds `(verb_id, object_id)` in
    /// class-id order.
    pub fn new<S: Into<String>>(
        verbs: Vec<(S, S)>,
        objects: Vec<S>,
        pairs: &[(usize, usize)],
    ) -> Result<Self> {
        let verbs: Vec<Verb> = verbs
            .into_iter()
            .enumerate()
            .map(|(id, (base, gerund))| Verb {
                id,
                base: base.into(),
                gerund: gerund.into(),
            })
            .collect();
        let objects: Vec<Object> = objects
            .into_iter()
            .enumerate()
            .map(|(id, noun)| Object {
                id,
                noun: noun.into(),
            })
            .collect();
        let classes = pairs
            .iter()
            .enumerate()
            .map(|(class_id, &(verb_id, object_id))| HoiClass {
                class_id,
                verb_id,
                object_id,
            })
            .collect();
        let taxonomy = Taxonomy {
            verbs,
            objects,
            classes,
        };
        taxonomy.validate()?;
        Ok(taxonomy)
    }

    fn validate(&self) -> Result<()> {
        if self.verbs.is_empty() || self.objects.is_empty() {
            return Err(arg("taxonomy needs at least one verb and one object"));
        }
        if self.classes.is_empty() {
            return Err(arg("taxonomy needs at least one class"));
        }
        let mut names = HashSet::new();
        for v in &self.verbs {
            check_name("verb", &v.base)?;
            check_name("gerund", &v.gerund)?;
            if !names.insert(&v.base) {
                return Err(arg(format!("duplicate verb {:?}", v.base)));
            }
        }
        names.clear();
        for o in &self.objects {
            check_name("object", &o.noun)?;
            if !names.insert(&o.noun) {
                return Err(arg(format!("duplicate object {:?}", o.noun)));
            }
        }
        let mut seen = HashSet::new();
        for c in &self.classes {
            if c.verb_id >= self.verbs.len() {
                return Err(Error::Index {
                    what: "verbs",
                    index: c.verb_id,
                    len: self.verbs.len(),
                });
            }
            if c.object_id >= self.objects.len() {
                return Err(Error::Index {
                    what: "objects",
                    index: c.object_id,
                    len: self.objects.len(),
                });
            }
            if !seen.insert((c.verb_id, c.object_id)) {
                return Err(arg(format!(
                    "duplicate class ⟨{}, {}⟩",
                    self.verbs[c.verb_id].base, self.objects[c.object_id].noun
                )));
            }
        }
        Ok(())
    }

    pub fn verbs(&self) -> &[Verb] {
        &self.verbs
    }

    pub fn objects(&self) -> &[Object] {
        &self.objects
    }

    pub fn classes(&self) -> &[HoiClass] {
        &self.classes
    }

    pub fn n_verbs(&self) -> usize {
        self.verbs.len()
    }

    pub fn n_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class(&self, class_id: usize) -> Result<&HoiClass> {
        self.classes.get(class_id).ok_or(Error::Index {
            what: "classes",
            index: class_id,
            len: self.classes.len(),
        })
    }

    /// Label used to cross-reference classes in embedding and checkpoint
    /// files: `verb:object`.
    pub fn label(&self, class_id: usize) -> Result<String> {
        let c = self.class(class_id)?;
        Ok(format!(
            "{}:{}",
            self.verbs[c.verb_id].base, self.objects[c.object_id].noun
        ))
    }

    pub fn labels(&self) -> Vec<String> {
        (0..self.n_classes())
            .map(|i| self.label(i).expect("class ids are dense"))
            .collect()
    }

    /// Number of classes using each verb, indexed by verb id.
    pub fn classes_per_verb(&self) -> Vec<usize> {
        let mut counts = vec![0; self.verbs.len()];
        for c in &self.classes {
            counts[c.verb_id] += 1;
        }
        counts
    }

    /// Number of classes using each object, indexed by object id.
    pub fn classes_per_object(&self) -> Vec<usize> {
        let mut counts = vec![0; self.objects.len()];
        for c in &self.classes {
            counts[c.object_id] += 1;
        }
        counts
    }

    /// Mean number of classes sharing a verb, averaged over all verbs.
    pub fn mean_classes_per_verb(&self) -> f64 {
        self.n_classes() as f64 / self.n_verbs() as f64
    }

    pub fn mean_classes_per_object(&self) -> f64 {
        self.n_classes() as f64 / self.n_objects() as f64
    }

    /// Class ids whose object is `object_id`, ascending.
    pub fn classes_with_object(&self, object_id: usize) -> Vec<usize> {
        self.classes
            .iter()
            .filter(|c| c.object_id == object_id)
            .map(|c| c.class_id)
            .collect()
    }

    /// Serializes to the line-oriented taxonomy document:
    ///
    /// ```text
    /// # hoi-taxonomy verbs=V objects=O classes=C
    /// V <id> <base> <gerund>
    /// O <id> <noun>
    /// C <class_id> <verb> <gerund> <object>
    /// ```
    ///
    /// Fields are tab-separated.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# hoi-taxonomy verbs={} objects={} classes={}\n",
            self.n_verbs(),
            self.n_objects(),
            self.n_classes()
        );
        for v in &self.verbs {
            let _ = writeln!(out, "V\t{}\t{}\t{}", v.id, v.base, v.gerund);
        }
        for o in &self.objects {
            let _ = writeln!(out, "O\t{}\t{}", o.id, o.noun);
        }
        for c in &self.classes {
            let v = &self.verbs[c.verb_id];
            let _ = writeln!(
                out,
                "C\t{}\t{}\t{}\t{}",
                c.class_id, v.base, v.gerund, self.objects[c.object_id].noun
            );
        }
        out
    }

    pub fn from_text<R: BufRead>(reader: R) -> Result<Self> {
        let mut verbs: Vec<(String, String)> = Vec::new();
        let mut objects: Vec<String> = Vec::new();
        let mut class_rows: Vec<(usize, usize, String, String, String)> = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let id = |f: &str| -> Result<usize> {
                f.parse()
                    .map_err(|_| format_err(line_no, format!("bad id {f:?}")))
            };
            match fields.as_slice() {
                ["V", vid, base, gerund] => {
                    if id(vid)? != verbs.len() {
                        return Err(format_err(line_no, "verb ids must be dense and ascending"));
                    }
                    verbs.push((base.to_string(), gerund.to_string()));
                }
                ["O", oid, noun] => {
                    if id(oid)? != objects.len() {
                        return Err(format_err(line_no, "object ids must be dense and ascending"));
                    }
                    objects.push(noun.to_string());
                }
                ["C", cid, verb, gerund, noun] => {
                    class_rows.push((
                        line_no,
                        id(cid)?,
                        verb.to_string(),
                        gerund.to_string(),
                        noun.to_string(),
                    ));
                }
                _ => return Err(format_err(line_no, "unrecognized record")),
            }
        }
        let verb_ids: HashMap<&str, usize> = verbs
            .iter()
            .enumerate()
            .map(|(i, (b, _))| (b.as_str(), i))
            .collect();
        let object_ids: HashMap<&str, usize> = objects
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let mut pairs = Vec::with_capacity(class_rows.len());
        for (line_no, cid, verb, gerund, noun) in &class_rows {
            if *cid != pairs.len() {
                return Err(format_err(*line_no, "class ids must be dense and ascending"));
            }
            let v = *verb_ids
                .get(verb.as_str())
                .ok_or_else(|| format_err(*line_no, format!("unknown verb {verb:?}")))?;
            if verbs[v].1 != *gerund {
                return Err(format_err(*line_no, "gerund disagrees with verb record"));
            }
            let o = *object_ids
                .get(noun.as_str())
                .ok_or_else(|| format_err(*line_no, format!("unknown object {noun:?}")))?;
            pairs.push((v, o));
        }
        Taxonomy::new(verbs, objects, &pairs)
    }
}

/// Builds a synthetic taxonomy with placeholder names `verbK` / `verbK-ing`
/// and `objK`.
pub fn build_taxonomy(
    n_verbs: usize,
    n_objects: usize,
    n_classes: usize,
    pairing: Pairing,
    seed: u64,
) -> Result<Taxonomy> {
    if n_verbs == 0 || n_objects == 0 {
        return Err(arg("n_verbs and n_objects must be positive"));
    }
    if n_classes == 0 {
        return Err(arg("n_classes must be positive"));
    }
    let available = n_verbs
        .checked_mul(n_objects)
        .ok_or_else(|| arg("n_verbs × n_objects overflows"))?;
    if n_classes > available {
        return Err(Error::Capacity {
            requested: n_classes,
            available,
        });
    }
    let pair_indices: Vec<usize> = match pairing {
        Pairing::FullCrossProduct => {
            if n_classes != available {
                return Err(arg(format!(
                    "full-cross-product pairing yields {available} classes, got n_classes = {n_classes}"
                )));
            }
            (0..available).collect()
        }
        Pairing::UniformRandom => {
            let mut rng = seeded_rng(seed, 0x7a0);
            let mut picked = index::sample(&mut rng, available, n_classes).into_vec();
            picked.sort_unstable();
            picked
        }
    };
    let pairs: Vec<(usize, usize)> = pair_indices
        .into_iter()
        .map(|p| (p / n_objects, p % n_objects))
        .collect();
    let verbs = (0..n_verbs)
        .map(|k| (format!("verb{k}"), format!("verb{k}-ing")))
        .collect();
    let objects = (0..n_objects).map(|k| format!("obj{k}")).collect();
    Taxonomy::new(verbs, objects, &pairs)
}

/// Renders "a person {gerund} a {noun}". Articles are not adjusted.
pub fn prompt_for(taxonomy: &Taxonomy, class_id: usize) -> Result<String> {
    let c = taxonomy.class(class_id)?;
    Ok(format!(
        "a person {} a {}",
        taxonomy.verbs[c.verb_id].gerund, taxonomy.objects[c.object_id].noun
    ))
}

/// Cumulative few-shot bands: the band at threshold `t` holds every class
/// whose training count is at most `t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyBands {
    thresholds: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl FrequencyBands {
    pub fn thresholds(&self) -> &[usize] {
        &self.thresholds
    }

    /// Members of the `k`-th band, ascending class id.
    pub fn members(&self, k: usize) -> &[usize] {
        &self.members[k]
    }

    pub fn band(&self, threshold: usize) -> Option<&[usize]> {
        self.thresholds
            .iter()
            .position(|&t| t == threshold)
            .map(|k| self.members[k].as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[usize])> {
        self.thresholds
            .iter()
            .copied()
            .zip(self.members.iter().map(Vec::as_slice))
    }

    pub fn empty() -> Self {
        FrequencyBands {
            thresholds: Vec::new(),
            members: Vec::new(),
        }
    }
}

pub fn tag_frequency_bands(
    taxonomy: &Taxonomy,
    train_counts: &[usize],
    thresholds: &[usize],
) -> Result<FrequencyBands> {
    if train_counts.len() != taxonomy.n_classes() {
        return Err(arg(format!(
            "train_counts has length {}, taxonomy has {} classes",
            train_counts.len(),
            taxonomy.n_classes()
        )));
    }
    if thresholds.contains(&0) || thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(arg("thresholds must be positive and strictly increasing"));
    }
    let members = thresholds
        .iter()
        .map(|&t| {
            train_counts
                .iter()
                .enumerate()
                .filter(|&(_, &n)| n <= t)
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    Ok(FrequencyBands {
        thresholds: thresholds.to_vec(),
        members,
    })
}
