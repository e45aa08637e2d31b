mod common;

use common::*;
use hoi_core::eval::{average_precision, iou, match_pairs, mean_ap, BBox, PairPrediction, PairTruth, ScoreMatrix};
use hoi_core::losses::SignLabels;
use hoi_core::taxonomy::{build_taxonomy, tag_frequency_bands, Pairing};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn random_list(g: &mut ChaCha8Rng, n: usize, ties: bool) -> (Vec<f64>, Vec<bool>) {
    let scores = (0..n)
        .map(|_| {
            if ties {
                g.random_range(0..5) as f64
            } else {
                g.random_range(-3.0..3.0)
            }
        })
        .collect();
    let pos = (0..n).map(|_| g.random_bool(0.3)).collect();
    (scores, pos)
}

#[test]
fn ap_matches_brute_force_with_and_without_ties() {
    let mut g = rng(21);
    for trial in 0..400 {
        let n = g.random_range(1..=120);
        let (s, p) = random_list(&mut g, n, trial % 2 == 0);
        let a = average_precision(&s, &p).unwrap();
        let b = brute_force_ap(&s, &p);
        match (a, b) {
            (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-12, "{a} {b}"),
            (None, None) => {}
            other => panic!("{other:?}"),
        }
    }
}

#[test]
fn ap_is_invariant_under_strictly_increasing_transforms() {
    let mut g = rng(4);
    for _ in 0..100 {
        let n = g.random_range(2..80);
        let (s, p) = random_list(&mut g, n, false);
        let t: Vec<f64> = s.iter().map(|v| (2.0 * v).exp() + 7.0).collect();
        assert_eq!(average_precision(&s, &p).unwrap(), average_precision(&t, &p).unwrap());
    }
}

#[test]
fn map_recomputes_from_columns_and_band_members() {
    let mut g = rng(9);
    let tax = build_taxonomy(5, 4, 20, Pairing::UniformRandom, 2).unwrap();
    let (n, c) = (200, 20);
    let mut counts: Vec<usize> = (0..c).map(|_| g.random_range(0..12)).collect();
    counts[3] = 0;
    let bands = tag_frequency_bands(&tax, &counts, &[1, 4, 8]).unwrap();
    let labels: Vec<SignLabels> = (0..n)
        .map(|_| {
            // Class 7 never appears, so its AP is undefined.
            let pos: Vec<usize> = (0..c).filter(|&k| k != 7 && g.random_bool(0.1)).collect();
            let pos = if pos.is_empty() { vec![0] } else { pos };
            SignLabels::from_positives(c, &pos).unwrap()
        })
        .collect();
    let data: Vec<f64> = (0..n * c).map(|_| g.random_range(-1.0..1.0)).collect();
    let scores = ScoreMatrix::new(c, data.clone()).unwrap();
    let report = mean_ap(&scores, &labels, &bands).unwrap();

    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let col: Vec<f64> = (0..n).map(|i| data[i * c + k]).collect();
            let pos: Vec<bool> = labels.iter().map(|l| l.is_positive(k)).collect();
            brute_force_ap(&col, &pos)
        })
        .collect();
    assert!(per_class[7].is_none());
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let overall = defined.iter().sum::<f64>() / defined.len() as f64;
    assert!((report.overall - overall).abs() < 1e-12);
    assert_eq!(report.n_defined, c - 1);
    for (k, v) in per_class.iter().enumerate() {
        match (report.per_class[k], v) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
            (None, None) => {}
            other => panic!("class {k}: {other:?}"),
        }
    }
    for t in [1usize, 4, 8] {
        let members: Vec<usize> = (0..c).filter(|&k| counts[k] <= t).collect();
        let aps: Vec<f64> = members.iter().filter_map(|&k| per_class[k]).collect();
        let band = report.band(t).unwrap();
        assert_eq!(band.n_members, members.len());
        assert_eq!(band.n_defined, aps.len());
        match band.map {
            Some(m) => assert!((m - aps.iter().sum::<f64>() / aps.len() as f64).abs() < 1e-12),
            None => assert!(aps.is_empty()),
        }
    }
}

#[test]
fn bands_match_brute_force_recount() {
    let mut g = rng(30);
    for _ in 0..50 {
        let tax = build_taxonomy(10, 10, 60, Pairing::UniformRandom, g.random()).unwrap();
        let counts: Vec<usize> = (0..60).map(|_| g.random_range(0..30)).collect();
        let bands = tag_frequency_bands(&tax, &counts, &[1, 5, 10, 20]).unwrap();
        for t in [1, 5, 10, 20] {
            let expected: Vec<usize> = (0..60).filter(|&k| counts[k] <= t).collect();
            assert_eq!(bands.band(t).unwrap(), expected.as_slice());
        }
    }
}

fn jitter(g: &mut ChaCha8Rng, b: &BBox, amount: f64) -> BBox {
    let mut d = || g.random_range(-amount..amount);
    BBox::new(b.x_min + d(), b.y_min + d(), b.x_max + d(), b.y_max + d()).unwrap()
}

fn grid_box(cell: usize) -> BBox {
    // Cells 100 apart never overlap each other.
    let x = (cell % 10) as f64 * 100.0;
    let y = (cell / 10) as f64 * 100.0;
    BBox::new(x, y, x + 40.0, y + 40.0).unwrap()
}

/// Size of a maximum bipartite matching between predictions and truths
/// where an edge needs same class and both IoUs > 0.5, by exhaustive search.
fn max_matching(preds: &[PairPrediction], truths: &[PairTruth]) -> usize {
    fn go(p: usize, preds: &[PairPrediction], truths: &[PairTruth], used: &mut Vec<bool>) -> usize {
        if p == preds.len() {
            return 0;
        }
        let mut best = go(p + 1, preds, truths, used);
        for t in 0..truths.len() {
            let ok = !used[t]
                && truths[t].class_id == preds[p].class_id
                && iou(&preds[p].human, &truths[t].human).unwrap() > 0.5
                && iou(&preds[p].object, &truths[t].object).unwrap() > 0.5;
            if ok {
                used[t] = true;
                best = best.max(1 + go(p + 1, preds, truths, used));
                used[t] = false;
            }
        }
        best
    }
    go(0, preds, truths, &mut vec![false; truths.len()])
}

#[test]
fn pair_matching_against_exhaustive_assignment() {
    let mut g = rng(77);
    for trial in 0..300 {
        let n_truth = g.random_range(0..5);
        let crowded = trial % 2 == 0;
        let truths: Vec<PairTruth> = (0..n_truth)
            .map(|k| {
                let cell = if crowded { 0 } else { 2 * k };
                PairTruth {
                    human: jitter(&mut g, &grid_box(cell), 8.0),
                    object: jitter(&mut g, &grid_box(cell + 1), 8.0),
                    class_id: g.random_range(0..2),
                }
            })
            .collect();
        let preds: Vec<PairPrediction> = (0..g.random_range(0..6))
            .map(|_| {
                let cell = if crowded { 0 } else { 2 * g.random_range(0..5) };
                PairPrediction {
                    human: jitter(&mut g, &grid_box(cell), 8.0),
                    object: jitter(&mut g, &grid_box(cell + 1), 8.0),
                    class_id: g.random_range(0..2),
                    score: g.random(),
                }
            })
            .collect();
        let flags = match_pairs(&preds, &truths).unwrap();
        let tp = flags.iter().filter(|&&f| f).count();
        let best = max_matching(&preds, &truths);
        assert!(tp <= best);
        // Every flagged prediction has at least one qualifying truth.
        for (p, &f) in preds.iter().zip(&flags) {
            let any = truths.iter().any(|t| {
                t.class_id == p.class_id
                    && iou(&p.human, &t.human).unwrap() > 0.5
                    && iou(&p.object, &t.object).unwrap() > 0.5
            });
            assert!(!f || any);
        }
        if !crowded {
            // Well-separated truths: greedy cannot block itself.
            assert_eq!(tp, best, "trial {trial}");
        }
    }
}
