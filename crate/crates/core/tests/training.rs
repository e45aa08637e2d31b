use std::collections::BTreeMap;
use std::fs;

use hoi_core::classifier::{init_classifier, InitStrategy};
use hoi_core::data::{generate_dataset, DatasetSpec};
use hoi_core::embeddings::{compositional_embeddings, EmbeddingTable, Provenance};
use hoi_core::eval::mean_ap;
use hoi_core::experiment::{run_experiment, ExperimentConfig, Task};
use hoi_core::taxonomy::{build_taxonomy, tag_frequency_bands, FrequencyBands, Pairing, Taxonomy};
use hoi_core::train::{score_dataset, train, Optimizer, TrainConfig};

fn small_config() -> ExperimentConfig {
    ExperimentConfig::from_toml(
        r#"
seeds = [0, 1, 2]
n_test = 300
bands = [5, 20]
[taxonomy]
n_verbs = 8
n_objects = 6
n_classes = 30
[embeddings]
source = "synthetic"
dim = 8
[data]
n_samples = 600
dim = 8
[train]
epochs = 2
min_count = 5
"#,
    )
    .unwrap()
}

#[test]
fn separable_toy_reaches_perfect_map() {
    let tax = Taxonomy::new(vec![("hold", "holding"), ("throw", "throwing")], vec!["ball"], &[(0, 0), (1, 0)]).unwrap();
    let emb = EmbeddingTable::from_rows(vec![vec![1.0, 0.0], vec![-1.0, 0.0]], Provenance::External).unwrap();
    let spec = DatasetSpec {
        n_samples: 200,
        cooccur_max: 1,
        feature_noise: 0.0,
        dim: 2,
        ..DatasetSpec::default()
    };
    for seed in 0..10 {
        let train_set = generate_dataset(&spec, &tax, &emb, seed).unwrap();
        let test_set = generate_dataset(&DatasetSpec { n_samples: 100, ..spec }, &tax, &emb, seed + 100).unwrap();
        let mut clf = init_classifier(2, 2, InitStrategy::Random, None, 100.0, seed).unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 16,
            base_lr: 0.05,
            min_count: 4,
            seed,
            ..TrainConfig::default()
        };
        train(&cfg, &train_set, &mut clf).unwrap();
        let scores = score_dataset(&clf, &test_set).unwrap();
        let labels: Vec<_> = test_set.samples().iter().map(|s| s.labels.clone()).collect();
        let map = mean_ap(&scores, &labels, &FrequencyBands::empty()).unwrap();
        assert_eq!(map.overall, 1.0, "seed {seed}");
        // Exhaustive check: every positive outscores every negative.
        for k in 0..2 {
            let col = scores.column(k);
            let lo = (0..col.len()).filter(|&i| labels[i].is_positive(k)).map(|i| col[i]).fold(f64::INFINITY, f64::min);
            let hi = (0..col.len()).filter(|&i| !labels[i].is_positive(k)).map(|i| col[i]).fold(f64::NEG_INFINITY, f64::max);
            assert!(lo > hi);
        }
    }
}

#[test]
fn zero_epochs_reports_untrained_map() {
    let mut cfg = small_config();
    cfg.train.epochs = 0;
    cfg.seeds = vec![4];
    let result = run_experiment(&cfg, None).unwrap();
    let task = Task::generate(&cfg, 4).unwrap();
    for runs in &result.cells {
        let r = &runs.runs[0];
        assert_eq!(r.initial, r.classifier);
        let untrained = init_classifier(30, 8, runs.cell.init, Some(&task.embeddings), runs.cell.gamma, 4).unwrap();
        assert_eq!(r.map.overall, task.evaluate(&untrained).unwrap().overall);
        assert!(r.history.epoch_losses.is_empty());
    }
}

#[test]
fn experiment_outputs_are_byte_identical() {
    let cfg = small_config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_experiment(&cfg, Some(a.path())).unwrap();
    run_experiment(&cfg, Some(b.path())).unwrap();
    let mut files = Vec::new();
    let mut stack = vec![a.path().to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p.strip_prefix(a.path()).unwrap().to_path_buf());
            }
        }
    }
    // 3 top-level files plus 4 per run (2 cells × 3 seeds).
    assert_eq!(files.len(), 3 + 4 * 6);
    for f in files {
        assert_eq!(fs::read(a.path().join(&f)).unwrap(), fs::read(b.path().join(&f)).unwrap(), "{f:?}");
    }
}

#[test]
fn summary_matches_recomputation_from_reports() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&cfg, Some(dir.path())).unwrap();
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let mut checked = 0;
    for line in lines {
        let row: Vec<&str> = line.split(',').collect();
        let cell = row[0];
        let mut maps = Vec::new();
        let mut bands: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for seed in &cfg.seeds {
            let text = fs::read_to_string(dir.path().join(format!("cells/{cell}/seed-{seed}/report.toml"))).unwrap();
            let doc: toml::Table = text.parse().unwrap();
            assert_eq!(doc["cell"].as_str().unwrap(), cell);
            maps.push(doc["map"].as_float().unwrap());
            for b in doc["bands"].as_array().unwrap() {
                if let Some(v) = b.get("map").and_then(|v| v.as_float()) {
                    bands.entry(b["threshold"].as_integer().unwrap() as usize).or_default().push(v);
                }
            }
        }
        let n = maps.len() as f64;
        let mean = maps.iter().sum::<f64>() / n;
        let std = (maps.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let got_mean: f64 = row[col("map_mean")].parse().unwrap();
        let got_std: f64 = row[col("map_std")].parse().unwrap();
        assert!((got_mean - mean).abs() <= 1e-12 * mean.abs());
        assert!((got_std - std).abs() <= 1e-9 * std.max(1e-12));
        assert_eq!(row[col("n_seeds")], "3");
        for t in &cfg.bands {
            let vals = bands.get(t).cloned().unwrap_or_default();
            assert_eq!(row[col(&format!("few{t}_n"))], vals.len().to_string());
            if !vals.is_empty() {
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let got: f64 = row[col(&format!("few{t}_mean"))].parse().unwrap();
                assert!((got - m).abs() <= 1e-12);
            }
        }
        checked += 1;
    }
    assert_eq!(checked, 2);
}

#[test]
fn small_lr_sgd_is_monotone_on_a_fixed_batch() {
    let tax = build_taxonomy(6, 5, 20, Pairing::UniformRandom, 3).unwrap();
    let emb = compositional_embeddings(&tax, 8, 0.1, 3).unwrap();
    let spec = DatasetSpec {
        n_samples: 64,
        dim: 8,
        ..DatasetSpec::default()
    };
    let data = generate_dataset(&spec, &tax, &emb, 3).unwrap();
    for init in [InitStrategy::Embedding, InitStrategy::Random] {
        let mut clf = init_classifier(20, 8, init, Some(&emb), 10.0, 1).unwrap();
        // One full-data batch per epoch, no oversampling: the same batch every step.
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 64,
            base_lr: 1e-3,
            optimizer: Optimizer::Sgd,
            restart_period: 1000,
            min_count: 0,
            ..TrainConfig::default()
        };
        let h = train(&cfg, &data, &mut clf).unwrap();
        let steps = h.epoch_losses.windows(2).count();
        let ok = h.epoch_losses.windows(2).filter(|w| w[1] <= w[0]).count();
        assert!(ok as f64 >= 0.95 * steps as f64, "{init:?}: {ok}/{steps}");
        assert!(h.epoch_losses.last().unwrap() < &h.epoch_losses[0]);
    }
}

#[test]
fn bands_follow_training_counts() {
    let cfg = small_config();
    let task = Task::generate(&cfg, 2).unwrap();
    let recount = {
        let mut c = vec![0usize; 30];
        for s in task.train.samples() {
            s.labels.positives().for_each(|k| c[k] += 1);
        }
        c
    };
    assert_eq!(task.train.train_counts(), recount.as_slice());
    let again = tag_frequency_bands(&task.taxonomy, &recount, &cfg.bands).unwrap();
    assert_eq!(again, task.bands);
}
