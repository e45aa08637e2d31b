mod common;

use common::*;
use hoi_core::attention::{
    cls_attention, masked_cls_attention, patch_mask, patch_mask_with, AttentionInput, InclusionRule, PatchGrid,
};
use hoi_core::eval::BBox;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_input(g: &mut ChaCha8Rng, n_tokens: usize, d: usize) -> AttentionInput {
    let mut v = |n: usize| (0..n).map(|_| g.random_range(-2.0..2.0)).collect::<Vec<f64>>();
    let (q, k, val) = (v(n_tokens * d), v(n_tokens * d), v(n_tokens * d));
    AttentionInput::new(n_tokens, d, d, q, k, val).unwrap()
}

fn random_box(g: &mut ChaCha8Rng, w: f64, h: f64) -> BBox {
    let (x0, y0) = (g.random_range(-20.0..w), g.random_range(-20.0..h));
    BBox::new(x0, y0, x0 + g.random_range(1.0..w), y0 + g.random_range(1.0..h)).unwrap()
}

#[test]
fn masked_attention_is_the_restricted_softmax() {
    let mut g = rng(13);
    for _ in 0..300 {
        let grid = PatchGrid::new(g.random_range(16..120), g.random_range(16..120), g.random_range(8..40)).unwrap();
        let d = g.random_range(1..9);
        let input = random_input(&mut g, grid.n_patches() + 1, d);
        let boxes: Vec<BBox> = (0..g.random_range(1..4))
            .map(|_| random_box(&mut g, grid.width() as f64, grid.height() as f64))
            .collect();
        let mask = patch_mask(&boxes, &grid).unwrap();
        let att = masked_cls_attention(&input, &mask).unwrap();

        let scale = 1.0 / (d as f64).sqrt();
        let logits: Vec<f64> = (0..input.n_tokens())
            .map(|t| input.key(t).iter().zip(input.query(0)).map(|(a, b)| a * b).sum::<f64>() * scale)
            .collect();
        let allowed: Vec<bool> = std::iter::once(true).chain(mask.in_region().iter().copied()).collect();
        let expected = restricted_softmax(&logits, &allowed);
        for (t, (&w, &e)) in att.weights.iter().zip(&expected).enumerate() {
            if !allowed[t] {
                assert_eq!(w, 0.0);
            }
            assert!((w - e).abs() <= 1e-12, "{w} {e}");
        }
        for j in 0..d {
            let out: f64 = (0..input.n_tokens()).map(|t| expected[t] * input.value(t)[j]).sum();
            assert!((att.output[j] - out).abs() <= 1e-12);
        }
    }
}

#[test]
fn any_overlap_mask_matches_geometric_recount() {
    let mut g = rng(2);
    for _ in 0..200 {
        let patch = g.random_range(4..30);
        let grid = PatchGrid::new(g.random_range(10..100), g.random_range(10..100), patch).unwrap();
        let b = random_box(&mut g, grid.width() as f64, grid.height() as f64);
        let mask = patch_mask(&[b], &grid).unwrap();
        let p = grid.cols();
        for (idx, &inside) in mask.in_region().iter().enumerate() {
            let (r, c) = (idx / p, idx % p);
            // Patch [c·s, min((c+1)·s, W)] × [r·s, min((r+1)·s, H)].
            let s = f64::from(patch);
            let x0 = c as f64 * s;
            let x1 = ((c + 1) as f64 * s).min(grid.width() as f64);
            let y0 = r as f64 * s;
            let y1 = ((r + 1) as f64 * s).min(grid.height() as f64);
            let bx0 = b.x_min.max(0.0);
            let by0 = b.y_min.max(0.0);
            let bx1 = b.x_max.min(grid.width() as f64);
            let by1 = b.y_max.min(grid.height() as f64);
            let overlaps = x0.max(bx0) < x1.min(bx1) && y0.max(by0) < y1.min(by1);
            assert_eq!(inside, overlaps);
        }
    }
}

#[test]
fn center_rule_is_a_subset_of_any_overlap() {
    let mut g = rng(6);
    for _ in 0..200 {
        let grid = PatchGrid::new(96, 64, 16).unwrap();
        let b = random_box(&mut g, 96.0, 64.0);
        let any = patch_mask(&[b], &grid).unwrap();
        let center = patch_mask_with(&[b], &grid, InclusionRule::CenterInBox).unwrap();
        for (a, c) in any.in_region().iter().zip(center.in_region()) {
            assert!(!c || *a);
        }
    }
}

#[test]
fn full_image_reproduces_unmasked() {
    let mut g = rng(1);
    for _ in 0..100 {
        let grid = PatchGrid::new(g.random_range(8..80), g.random_range(8..80), g.random_range(4..16)).unwrap();
        let input = random_input(&mut g, grid.n_patches() + 1, 4);
        let mask = patch_mask(&[grid.full_image()], &grid).unwrap();
        let a = masked_cls_attention(&input, &mask).unwrap();
        let b = cls_attention(&input);
        for (x, y) in a.weights.iter().zip(&b.weights) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}
