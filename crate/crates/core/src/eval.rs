//! Ranking metrics and human-object pair matching.
//!
//! AP is non-interpolated: rank by descending score with ties broken by
//! ascending original index, then average precision@k over the ranks `k`
//! of the positives. Classes without test positives have undefined AP and
//! are left out of every mean.

use std::io::BufRead;

use crate::error::{arg, format_err, Error, Result};
use crate::losses::SignLabels;
use crate::taxonomy::FrequencyBands;

/// Indices sorted by descending score, ties by ascending index.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Non-interpolated average precision. Returns `Ok(None)` when there are no
/// positives.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Result<Option<f64>> {
    if scores.len() != positives.len() {
        return Err(arg(format!(
            "{} scores but {} labels",
            scores.len(),
            positives.len()
        )));
    }
    let n_pos = positives.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Ok(None);
    }
    Ok(Some(precision_sum(scores, positives) / n_pos as f64))
}

fn precision_sum(scores: &[f64], positives: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &i) in ranking(scores).iter().enumerate() {
        if positives[i] {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    sum
}

/// Detection AP: precision summed at true-positive ranks, divided by the
/// number of ground truths so missed truths count against recall.
pub fn detection_average_precision(
    scores: &[f64],
    true_positive: &[bool],
    n_truths: usize,
) -> Result<Option<f64>> {
    if scores.len() != true_positive.len() {
        return Err(arg("scores and flags differ in length"));
    }
    if n_truths == 0 {
        return Ok(None);
    }
    let tp = true_positive.iter().filter(|&&t| t).count();
    if tp > n_truths {
        return Err(arg(format!("{tp} true positives for {n_truths} truths")));
    }
    Ok(Some(precision_sum(scores, true_positive) / n_truths as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandMap {
    pub threshold: usize,
    pub n_members: usize,
    /// Members with defined AP.
    pub n_defined: usize,
    pub map: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapReport {
    pub per_class: Vec<Option<f64>>,
    pub overall: f64,
    pub n_defined: usize,
    pub bands: Vec<BandMap>,
}

impl MapReport {
    pub fn band(&self, threshold: usize) -> Option<&BandMap> {
        self.bands.iter().find(|b| b.threshold == threshold)
    }
}

/// Row-major `N × C` score matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    n_classes: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(n_classes: usize, data: Vec<f64>) -> Result<Self> {
        if n_classes == 0 || !data.len().is_multiple_of(n_classes) {
            return Err(arg("score data is not a whole number of rows"));
        }
        Ok(ScoreMatrix { n_classes, data })
    }

    pub fn n_rows(&self) -> usize {
        self.data.len() / self.n_classes
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_classes..(i + 1) * self.n_classes]
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        self.data.iter().skip(k).step_by(self.n_classes).copied().collect()
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn mean_ap(scores: &ScoreMatrix, labels: &[SignLabels], bands: &FrequencyBands) -> Result<MapReport> {
    let c = scores.n_classes();
    if scores.n_rows() != labels.len() {
        return Err(arg(format!(
            "{} score rows but {} label rows",
            scores.n_rows(),
            labels.len()
        )));
    }
    if labels.iter().any(|y| y.len() != c) {
        return Err(arg("label rows must have C entries"));
    }
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let positives: Vec<bool> = labels.iter().map(|y| y.is_positive(k)).collect();
            average_precision(&scores.column(k), &positives)
        })
        .collect::<Result<_>>()?;
    let n_defined = per_class.iter().flatten().count();
    let overall = mean(per_class.iter().flatten().copied())
        .ok_or_else(|| Error::Undefined("no class has a test positive".into()))?;
    let bands = bands
        .iter()
        .map(|(threshold, members)| {
            if let Some(&bad) = members.iter().find(|&&m| m >= c) {
                return Err(Error::Index {
                    what: "classes",
                    index: bad,
                    len: c,
                });
            }
            let defined = members.iter().filter_map(|&m| per_class[m]);
            Ok(BandMap {
                threshold,
                n_members: members.len(),
                n_defined: members.iter().filter(|&&m| per_class[m].is_some()).count(),
                map: mean(defined),
            })
        })
        .collect::<Result<_>>()?;
    Ok(MapReport {
        per_class,
        overall,
        n_defined,
        bands,
    })
}

/// Axis-aligned box in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.check()?;
        Ok(b)
    }

    fn check(&self) -> Result<()> {
        let finite = [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(arg(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    /// Overlap area, zero when disjoint or merely touching.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }

    /// Parses the list format: one `x_min y_min x_max y_max` per line,
    /// blank lines and `#` comments skipped.
    pub fn parse_list<R: BufRead>(reader: R) -> Result<Vec<BBox>> {
        let mut out = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let v = crate::embeddings::parse_reals(i + 1, t)?;
            let [a, b, c, d] = v[..] else {
                return Err(format_err(i + 1, "expected `x_min y_min x_max y_max`"));
            };
            out.push(BBox::new(a, b, c, d).map_err(|e| format_err(i + 1, e.to_string()))?);
        }
        Ok(out)
    }
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.check()?;
    b.check()?;
    let inter = a.intersection_area(b);
    Ok(inter / (a.area() + b.area() - inter))
}

pub const PAIR_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairPrediction {
    pub human: BBox,
    pub object: BBox,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairTruth {
    pub human: BBox,
    pub object: BBox,
    pub class_id: usize,
}

/// Greedy per-class matching, highest score first. A prediction is a true
/// positive when an unmatched same-class truth overlaps it with human IoU
/// and object IoU both above 0.5; among several candidates the one with the
/// largest min(human IoU, object IoU) is taken. Flags are returned in input
/// order.
pub fn match_pairs(predictions: &[PairPrediction], truths: &[PairTruth]) -> Result<Vec<bool>> {
    let mut flags = vec![false; predictions.len()];
    let mut matched = vec![false; truths.len()];
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| {
        predictions[b]
            .score
            .total_cmp(&predictions[a].score)
            .then(a.cmp(&b))
    });
    for p in order {
        let pred = &predictions[p];
        let mut best: Option<(usize, f64)> = None;
        for (t, truth) in truths.iter().enumerate() {
            if matched[t] || truth.class_id != pred.class_id {
                continue;
            }
            let overlap = iou(&pred.human, &truth.human)?.min(iou(&pred.object, &truth.object)?);
            if overlap > PAIR_IOU_THRESHOLD && best.is_none_or(|(_, o)| overlap > o) {
                best = Some((t, overlap));
            }
        }
        if let Some((t, _)) = best {
            matched[t] = true;
            flags[p] = true;
        }
    }
    Ok(flags)
}

/// Detection mAP over classes with at least one truth.
pub fn detection_map(predictions: &[PairPrediction], truths: &[PairTruth]) -> Result<f64> {
    let flags = match_pairs(predictions, truths)?;
    let n_classes = predictions
        .iter()
        .map(|p| p.class_id)
        .chain(truths.iter().map(|t| t.class_id))
        .max()
        .map_or(0, |m| m + 1);
    let mut aps = Vec::new();
    for k in 0..n_classes {
        let n_truths = truths.iter().filter(|t| t.class_id == k).count();
        let (scores, tp): (Vec<f64>, Vec<bool>) = predictions
            .iter()
            .zip(&flags)
            .filter(|(p, _)| p.class_id == k)
            .map(|(p, &f)| (p.score, f))
            .unzip();
        if let Some(ap) = detection_average_precision(&scores, &tp, n_truths)? {
            aps.push(ap);
        }
    }
    mean(aps.into_iter()).ok_or_else(|| Error::Undefined("no class has a ground truth".into()))
}
