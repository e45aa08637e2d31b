//! Box-restricted CLS attention and regional score combination.
//!
//! Boxes become a patch mask; in the final attention layer the CLS row gets
//! an additive −∞ on every patch outside the region. Here that is realized
//! by dropping masked columns from the softmax, so their weight is exactly
//! zero. The CLS token itself is never masked.

use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::eval::BBox;
use crate::linalg::dot;
use crate::taxonomy::Taxonomy;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    width: u32,
    height: u32,
    patch: u32,
    rows: u32,
    cols: u32,
}

impl PatchGrid {
    pub fn new(width: u32, height: u32, patch: u32) -> Result<Self> {
        if width == 0 || height == 0 || patch == 0 {
            return Err(arg("image size and patch size must be positive"));
        }
        Ok(PatchGrid {
            width,
            height,
            patch,
            rows: height.div_ceil(patch),
            cols: width.div_ceil(patch),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows as usize
    }

    pub fn cols(&self) -> usize {
        self.cols as usize
    }

    pub fn n_patches(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// Pixel rectangle of patch `(row, col)`; edge patches are cropped to
    /// the image.
    pub fn patch_rect(&self, row: usize, col: usize) -> BBox {
        let p = f64::from(self.patch);
        let x0 = col as f64 * p;
        let y0 = row as f64 * p;
        BBox {
            x_min: x0,
            y_min: y0,
            x_max: (x0 + p).min(f64::from(self.width)),
            y_max: (y0 + p).min(f64::from(self.height)),
        }
    }

    pub fn full_image(&self) -> BBox {
        BBox {
            x_min: 0.0,
            y_min: 0.0,
            x_max: f64::from(self.width),
            y_max: f64::from(self.height),
        }
    }
}

/// When a patch counts as inside the region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InclusionRule {
    /// Any positive-area overlap with a box.
    #[default]
    AnyOverlap,
    /// The patch center lies inside a box (closed on the min edges).
    CenterInBox,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchMask {
    grid: PatchGrid,
    /// Row-major, one per patch.
    in_region: Vec<bool>,
}

impl PatchMask {
    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn in_region(&self) -> &[bool] {
        &self.in_region
    }

    pub fn n_patches(&self) -> usize {
        self.in_region.len()
    }

    pub fn n_in_region(&self) -> usize {
        self.in_region.iter().filter(|&&f| f).count()
    }

    /// Mask with an explicit flag per patch.
    pub fn from_flags(grid: PatchGrid, in_region: Vec<bool>) -> Result<Self> {
        if in_region.len() != grid.n_patches() {
            return Err(arg("flag count must equal rows × cols"));
        }
        Ok(PatchMask { grid, in_region })
    }
}

fn clamp_box(b: &BBox, grid: &PatchGrid) -> Option<BBox> {
    let img = grid.full_image();
    let c = BBox {
        x_min: b.x_min.max(img.x_min),
        y_min: b.y_min.max(img.y_min),
        x_max: b.x_max.min(img.x_max),
        y_max: b.y_max.min(img.y_max),
    };
    (c.x_min < c.x_max && c.y_min < c.y_max).then_some(c)
}

pub fn patch_mask(boxes: &[BBox], grid: &PatchGrid) -> Result<PatchMask> {
    patch_mask_with(boxes, grid, InclusionRule::AnyOverlap)
}

/// The union of all boxes (human and object alike) forms the region.
pub fn patch_mask_with(boxes: &[BBox], grid: &PatchGrid, rule: InclusionRule) -> Result<PatchMask> {
    if boxes.is_empty() {
        return Err(arg("patch mask needs at least one box"));
    }
    let clamped: Vec<BBox> = boxes.iter().filter_map(|b| clamp_box(b, grid)).collect();
    let mut in_region = Vec::with_capacity(grid.n_patches());
    for r in 0..grid.rows() {
        for c in 0..grid.cols() {
            let rect = grid.patch_rect(r, c);
            let inside = clamped.iter().any(|b| match rule {
                InclusionRule::AnyOverlap => rect.intersection_area(b) > 0.0,
                InclusionRule::CenterInBox => {
                    let cx = 0.5 * (rect.x_min + rect.x_max);
                    let cy = 0.5 * (rect.y_min + rect.y_max);
                    cx >= b.x_min && cx < b.x_max && cy >= b.y_min && cy < b.y_max
                }
            });
            in_region.push(inside);
        }
    }
    Ok(PatchMask {
        grid: *grid,
        in_region,
    })
}

/// Token-major Q, K, V. Token 0 is CLS, tokens 1..=P are patches.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionInput {
    n_tokens: usize,
    d_k: usize,
    d_v: usize,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
}

impl AttentionInput {
    pub fn new(n_tokens: usize, d_k: usize, d_v: usize, q: Vec<f64>, k: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if n_tokens == 0 || d_k == 0 || d_v == 0 {
            return Err(arg("attention needs ≥ 1 token and positive dimensions"));
        }
        if q.len() != n_tokens * d_k || k.len() != n_tokens * d_k || v.len() != n_tokens * d_v {
            return Err(arg("Q, K, V shapes disagree with token count"));
        }
        if q.iter().chain(&k).chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::Value("attention inputs must be finite".into()));
        }
        Ok(AttentionInput {
            n_tokens,
            d_k,
            d_v,
            q,
            k,
            v,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn d_k(&self) -> usize {
        self.d_k
    }

    pub fn d_v(&self) -> usize {
        self.d_v
    }

    pub fn query(&self, t: usize) -> &[f64] {
        &self.q[t * self.d_k..(t + 1) * self.d_k]
    }

    pub fn key(&self, t: usize) -> &[f64] {
        &self.k[t * self.d_k..(t + 1) * self.d_k]
    }

    pub fn value(&self, t: usize) -> &[f64] {
        &self.v[t * self.d_v..(t + 1) * self.d_v]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClsAttention {
    /// One weight per token, CLS first.
    pub weights: Vec<f64>,
    pub output: Vec<f64>,
}

fn cls_attention_over(input: &AttentionInput, allowed: impl Fn(usize) -> bool) -> ClsAttention {
    let scale = 1.0 / (input.d_k as f64).sqrt();
    let q0 = input.query(0);
    let logits: Vec<Option<f64>> = (0..input.n_tokens)
        .map(|t| allowed(t).then(|| dot(q0, input.key(t)) * scale))
        .collect();
    let m = logits.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = logits
        .iter()
        .map(|l| l.map_or(0.0, |l| (l - m).exp()))
        .collect();
    let z: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= z);
    let mut output = vec![0.0; input.d_v];
    for (t, &w) in weights.iter().enumerate() {
        if w != 0.0 {
            for (o, v) in output.iter_mut().zip(input.value(t)) {
                *o += w * v;
            }
        }
    }
    ClsAttention { weights, output }
}

/// Row 0 of `softmax(QKᵀ/√d_k)V` with no mask.
pub fn cls_attention(input: &AttentionInput) -> ClsAttention {
    cls_attention_over(input, |_| true)
}

/// Row 0 of `softmax(Φ + QKᵀ/√d_k)V` where Φ is −∞ on out-of-region patch
/// columns. Only the CLS row is computed.
pub fn masked_cls_attention(input: &AttentionInput, mask: &PatchMask) -> Result<ClsAttention> {
    if input.n_tokens != mask.n_patches() + 1 {
        return Err(arg(format!(
            "{} tokens for {} patches (expected P + 1)",
            input.n_tokens,
            mask.n_patches()
        )));
    }
    Ok(cls_attention_over(input, |t| t == 0 || mask.in_region[t - 1]))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectDetection {
    pub object_id: usize,
    pub confidence: f64,
}

/// Pair scores for one detected object: every HOI class with that object
/// gets `hoi_score · confidence`; classes with other objects are dropped.
pub fn combine_detection_scores(
    hoi_scores: &[f64],
    detection: ObjectDetection,
    taxonomy: &Taxonomy,
) -> Result<Vec<(usize, f64)>> {
    if hoi_scores.len() != taxonomy.n_classes() {
        return Err(arg(format!(
            "{} HOI scores for {} classes",
            hoi_scores.len(),
            taxonomy.n_classes()
        )));
    }
    if detection.object_id >= taxonomy.n_objects() {
        return Err(arg(format!("unknown object class {}", detection.object_id)));
    }
    if !(0.0..=1.0).contains(&detection.confidence) {
        return Err(arg("detection confidence must lie in [0, 1]"));
    }
    Ok(taxonomy
        .classes_with_object(detection.object_id)
        .into_iter()
        .map(|k| (k, hoi_scores[k] * detection.confidence))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn grid_shape_uses_ceiling() {
        let g = PatchGrid::new(100, 70, 32).unwrap();
        assert_eq!((g.rows(), g.cols()), (3, 4));
        assert_eq!(g.patch_rect(2, 3), b(96.0, 64.0, 100.0, 70.0));
    }

    #[test]
    fn full_cover_box() {
        let g = PatchGrid::new(64, 64, 16).unwrap();
        let m = patch_mask(&[b(0.0, 0.0, 64.0, 64.0)], &g).unwrap();
        assert_eq!(m.n_in_region(), 16);
        let clamped = patch_mask(&[b(-10.0, -10.0, 100.0, 100.0)], &g).unwrap();
        assert_eq!(clamped, m);
    }

    #[test]
    fn aligned_box_selects_one_patch() {
        let g = PatchGrid::new(64, 64, 16).unwrap();
        let m = patch_mask(&[b(16.0, 32.0, 32.0, 48.0)], &g).unwrap();
        let on: Vec<usize> = (0..16).filter(|&i| m.in_region()[i]).collect();
        assert_eq!(on, vec![2 * 4 + 1]);
    }

    #[test]
    fn straddling_box_any_overlap_vs_center() {
        let g = PatchGrid::new(32, 16, 16).unwrap();
        let straddle = b(12.0, 4.0, 20.0, 12.0);
        let any = patch_mask(&[straddle], &g).unwrap();
        assert_eq!(any.in_region(), &[true, true]);
        let center = patch_mask_with(&[straddle], &g, InclusionRule::CenterInBox).unwrap();
        assert_eq!(center.in_region(), &[false, false]);
    }

    #[test]
    fn union_of_human_and_object() {
        let g = PatchGrid::new(48, 16, 16).unwrap();
        let m = patch_mask(&[b(0.0, 0.0, 16.0, 16.0), b(32.0, 0.0, 48.0, 16.0)], &g).unwrap();
        assert_eq!(m.in_region(), &[true, false, true]);
        assert!(patch_mask(&[], &g).is_err());
    }

    fn constant_input(n_tokens: usize) -> AttentionInput {
        let d = 2;
        AttentionInput::new(
            n_tokens,
            d,
            1,
            vec![1.0; n_tokens * d],
            vec![1.0; n_tokens * d],
            (0..n_tokens).map(|t| t as f64).collect(),
        )
        .unwrap()
    }

    #[test]
    fn uniform_logits_one_region_patch() {
        let g = PatchGrid::new(32, 32, 16).unwrap();
        let m = PatchMask::from_flags(g, vec![false, false, true, false]).unwrap();
        let a = masked_cls_attention(&constant_input(5), &m).unwrap();
        assert_eq!(a.weights, vec![0.5, 0.0, 0.0, 0.5, 0.0]);
        assert_eq!(a.output, vec![1.5]);
    }

    #[test]
    fn all_in_region_matches_unmasked() {
        let g = PatchGrid::new(32, 32, 16).unwrap();
        let m = patch_mask(&[g.full_image()], &g).unwrap();
        let input = constant_input(5);
        assert_eq!(masked_cls_attention(&input, &m).unwrap(), cls_attention(&input));
    }

    #[test]
    fn token_count_mismatch() {
        let g = PatchGrid::new(32, 32, 16).unwrap();
        let m = patch_mask(&[g.full_image()], &g).unwrap();
        assert!(masked_cls_attention(&constant_input(4), &m).is_err());
    }

    fn ride_taxonomy() -> Taxonomy {
        Taxonomy::new(
            vec![("ride", "riding"), ("hold", "holding")],
            vec!["bicycle", "horse"],
            &[(0, 0), (0, 1), (1, 0)],
        )
        .unwrap()
    }

    #[test]
    fn combine_filters_and_multiplies() {
        let t = ride_taxonomy();
        let scores = [0.8, 0.6, 0.3];
        let out = combine_detection_scores(&scores, ObjectDetection { object_id: 0, confidence: 0.5 }, &t).unwrap();
        assert_eq!(out, vec![(0, 0.4), (2, 0.15)]);
        let same = combine_detection_scores(&scores, ObjectDetection { object_id: 0, confidence: 1.0 }, &t).unwrap();
        assert_eq!(same, vec![(0, 0.8), (2, 0.3)]);
        let horse = combine_detection_scores(&scores, ObjectDetection { object_id: 0, confidence: 0.9 }, &t).unwrap();
        assert!(horse.iter().all(|&(k, _)| k != 1));
        assert!(combine_detection_scores(&scores, ObjectDetection { object_id: 2, confidence: 0.9 }, &t).is_err());
    }
}
