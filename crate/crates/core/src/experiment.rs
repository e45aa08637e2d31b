//! Seeded sweeps over (initialization, loss, γ) cells.
//!
//! Every output file is a pure function of the configuration: wall-clock
//! times are kept in memory and never written.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::classifier::{init_classifier, InitStrategy, LinearClassifier, DEFAULT_GAMMA};
use crate::data::{Dataset, DatasetSpec, LongTailSampler};
use crate::embeddings::{compositional_embeddings_with, load_embeddings, CompositionalParams, EmbeddingTable};
use crate::error::{Error, Result};
use crate::eval::{mean_ap, MapReport};
use crate::losses::LossKind;
use crate::taxonomy::{build_taxonomy, tag_frequency_bands, FrequencyBands, Pairing, Taxonomy};
use crate::train::{score_dataset, train, TrainConfig, TrainHistory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaxonomyConfig {
    pub n_verbs: usize,
    pub n_objects: usize,
    pub n_classes: usize,
    pub pairing: Pairing,
    /// Taxonomy document to load instead of generating one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl Default for TaxonomyConfig {
    fn default() -> Self {
        TaxonomyConfig {
            n_verbs: 117,
            n_objects: 80,
            n_classes: 600,
            pairing: Pairing::UniformRandom,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum EmbeddingSource {
    Synthetic(CompositionalParams),
    File {
        path: PathBuf,
        #[serde(default = "default_true")]
        normalize: bool,
    },
}

fn default_true() -> bool {
    true
}

impl Default for EmbeddingSource {
    fn default() -> Self {
        EmbeddingSource::Synthetic(CompositionalParams::default())
    }
}

/// One point of the sweep grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub init: InitStrategy,
    pub loss: LossKind,
    pub gamma: f64,
}

impl Cell {
    pub fn name(&self) -> String {
        format!("{}-{}-g{}", self.init.name(), self.loss.name(), self.gamma)
    }
}

/// Cross product of the listed axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Grid {
    pub inits: Vec<InitStrategy>,
    pub losses: Vec<LossKind>,
    pub gammas: Vec<f64>,
}

impl Default for Grid {
    fn default() -> Self {
        Grid {
            inits: vec![InitStrategy::Embedding, InitStrategy::Random],
            losses: vec![LossKind::LseSign],
            gammas: vec![DEFAULT_GAMMA],
        }
    }
}

impl Grid {
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &init in &self.inits {
            for &loss in &self.losses {
                for &gamma in &self.gammas {
                    out.push(Cell { init, loss, gamma });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    /// Few-shot band thresholds on training counts.
    pub bands: Vec<usize>,
    pub n_test: usize,
    pub taxonomy: TaxonomyConfig,
    pub embeddings: EmbeddingSource,
    pub data: DatasetSpec,
    pub train: TrainConfig,
    pub grid: Grid,
    /// Cells run in addition to the grid; duplicates are dropped.
    pub extra_cells: Vec<Cell>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![0, 1, 2, 3, 4],
            bands: vec![1, 5, 10],
            n_test: 6000,
            taxonomy: TaxonomyConfig::default(),
            embeddings: EmbeddingSource::default(),
            data: DatasetSpec::default(),
            train: TrainConfig::default(),
            grid: Grid::default(),
            extra_cells: Vec::new(),
        }
    }
}

fn config_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| config_err("<document>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut seen = BTreeSet::new();
        self.grid
            .cells()
            .into_iter()
            .chain(self.extra_cells.iter().copied())
            .filter(|c| seen.insert(c.name()))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(config_err("seeds", "at least one seed is required"));
        }
        if let EmbeddingSource::Synthetic(p) = &self.embeddings {
            if p.dim != self.data.dim {
                return Err(config_err(
                    "data.dim",
                    format!("{} differs from embeddings.dim = {}", self.data.dim, p.dim),
                ));
            }
        }
        if self.n_test == 0 {
            return Err(config_err("n_test", "test set must be non-empty"));
        }
        if self.data.n_samples == 0 {
            return Err(config_err("data.n_samples", "training set must be non-empty"));
        }
        if self.cells().is_empty() {
            return Err(config_err("grid", "no cells to run"));
        }
        for (k, c) in self.cells().iter().enumerate() {
            if !(c.gamma > 0.0 && c.gamma.is_finite()) {
                return Err(config_err(&format!("cells[{k}].gamma"), "must be positive"));
            }
        }
        self.train
            .validate()
            .map_err(|e| config_err("train", e.to_string()))?;
        Ok(())
    }
}

/// Everything generated from one seed, shared by all cells.
pub struct Task {
    pub taxonomy: Taxonomy,
    pub embeddings: EmbeddingTable,
    pub train: Dataset,
    pub test: Dataset,
    pub bands: FrequencyBands,
}

impl Task {
    pub fn generate(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        let tc = &config.taxonomy;
        let taxonomy = match &tc.path {
            Some(p) => Taxonomy::from_text(BufReader::new(fs::File::open(p)?))?,
            None => build_taxonomy(tc.n_verbs, tc.n_objects, tc.n_classes, tc.pairing, seed)
                .map_err(|e| config_err("taxonomy", e.to_string()))?,
        };
        let embeddings = match &config.embeddings {
            EmbeddingSource::Synthetic(p) => compositional_embeddings_with(&taxonomy, p, seed)?,
            EmbeddingSource::File { path, normalize } => {
                load_embeddings(BufReader::new(fs::File::open(path)?), &taxonomy, *normalize)?
            }
        };
        if embeddings.dim() != config.data.dim {
            return Err(config_err(
                "data.dim",
                format!("{} differs from embedding file dim {}", config.data.dim, embeddings.dim()),
            ));
        }
        let (train, test) = {
            let mut sampler = LongTailSampler::new(&config.data, &taxonomy, &embeddings, seed)?;
            let train = sampler.draw(config.data.n_samples)?;
            let test = sampler.draw(config.n_test)?;
            (train, test)
        };
        let bands = tag_frequency_bands(&taxonomy, train.train_counts(), &config.bands)
            .map_err(|e| config_err("bands", e.to_string()))?;
        Ok(Task {
            taxonomy,
            embeddings,
            train,
            test,
            bands,
        })
    }

    pub fn evaluate(&self, classifier: &LinearClassifier) -> Result<MapReport> {
        let scores = score_dataset(classifier, &self.test)?;
        let labels: Vec<_> = self.test.samples().iter().map(|s| s.labels.clone()).collect();
        mean_ap(&scores, &labels, &self.bands)
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub cell: Cell,
    pub seed: u64,
    pub history: TrainHistory,
    pub map: MapReport,
    pub initial: LinearClassifier,
    pub classifier: LinearClassifier,
    pub wall_clock: Duration,
}

pub fn run_cell(task: &Task, cell: Cell, train_config: &TrainConfig, seed: u64) -> Result<TrainReport> {
    let start = Instant::now();
    let mut clf = init_classifier(
        task.taxonomy.n_classes(),
        task.embeddings.dim(),
        cell.init,
        Some(&task.embeddings),
        cell.gamma,
        seed,
    )?;
    let initial = clf.clone();
    let cfg = TrainConfig {
        loss: cell.loss,
        seed,
        ..train_config.clone()
    };
    let history = train(&cfg, &task.train, &mut clf)?;
    let map = task.evaluate(&clf)?;
    Ok(TrainReport {
        cell,
        seed,
        history,
        map,
        initial,
        classifier: clf,
        wall_clock: start.elapsed(),
    })
}

#[derive(Serialize)]
struct BandRecord {
    threshold: usize,
    n_members: usize,
    n_defined: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    map: Option<f64>,
}

#[derive(Serialize)]
struct ClassRecord {
    class_id: usize,
    label: String,
    train_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    ap: Option<f64>,
}

#[derive(Serialize)]
struct ReportDocument<'a> {
    cell: String,
    seed: u64,
    init: InitStrategy,
    loss: LossKind,
    gamma: f64,
    ap: &'static str,
    reduction: &'static str,
    epochs: usize,
    steps_per_epoch: usize,
    map: f64,
    n_defined: usize,
    epoch_losses: &'a [f64],
    epoch_lrs: &'a [f64],
    bands: Vec<BandRecord>,
    classes: Vec<ClassRecord>,
}

impl TrainReport {
    /// Structured TOML report.
    pub fn to_text(&self, task: &Task) -> Result<String> {
        let doc = ReportDocument {
            cell: self.cell.name(),
            seed: self.seed,
            init: self.cell.init,
            loss: self.cell.loss,
            gamma: self.cell.gamma,
            ap: "non-interpolated; classes without test positives excluded",
            reduction: "baseline losses: mean over classes; all losses: mean over batch",
            epochs: self.history.epoch_losses.len(),
            steps_per_epoch: self.history.steps_per_epoch,
            map: self.map.overall,
            n_defined: self.map.n_defined,
            epoch_losses: &self.history.epoch_losses,
            epoch_lrs: &self.history.epoch_lrs,
            bands: self
                .map
                .bands
                .iter()
                .map(|b| BandRecord {
                    threshold: b.threshold,
                    n_members: b.n_members,
                    n_defined: b.n_defined,
                    map: b.map,
                })
                .collect(),
            classes: self
                .map
                .per_class
                .iter()
                .enumerate()
                .map(|(k, ap)| {
                    Ok(ClassRecord {
                        class_id: k,
                        label: task.taxonomy.label(k)?,
                        train_count: task.train.train_counts()[k],
                        ap: *ap,
                    })
                })
                .collect::<Result<_>>()?,
        };
        toml::to_string(&doc).map_err(|e| Error::Value(e.to_string()))
    }

    /// `epoch,loss,lr` rows.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("epoch,loss,lr\n");
        for (e, (l, lr)) in self
            .history
            .epoch_losses
            .iter()
            .zip(&self.history.epoch_lrs)
            .enumerate()
        {
            let _ = writeln!(out, "{e},{l:?},{lr:?}");
        }
        out
    }

    pub fn band_map(&self, threshold: usize) -> Option<f64> {
        self.map.band(threshold).and_then(|b| b.map)
    }
}

#[derive(Debug, Clone)]
pub struct CellRuns {
    pub cell: Cell,
    /// One report per seed, in config seed order.
    pub runs: Vec<TrainReport>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub bands: Vec<usize>,
    pub cells: Vec<CellRuns>,
}

/// Mean and sample standard deviation (n − 1; zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl ExperimentResult {
    pub fn cell(&self, cell: &Cell) -> Option<&CellRuns> {
        self.cells.iter().find(|c| c.cell.name() == cell.name())
    }

    /// `cell,init,loss,gamma,n_seeds,map_mean,map_std`, then a mean/std
    /// column pair per band. Bands empty or undefined for some seed average
    /// over the seeds where they are defined and report `n/a` when none are.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("cell,init,loss,gamma,n_seeds,map_mean,map_std");
        for t in &self.bands {
            let _ = write!(out, ",few{t}_mean,few{t}_std,few{t}_n");
        }
        out.push('\n');
        for c in &self.cells {
            let maps: Vec<f64> = c.runs.iter().map(|r| r.map.overall).collect();
            let (m, s) = mean_std(&maps);
            let _ = write!(
                out,
                "{},{},{},{},{},{m:?},{s:?}",
                c.cell.name(),
                c.cell.init.name(),
                c.cell.loss.name(),
                c.cell.gamma,
                c.runs.len()
            );
            for &t in &self.bands {
                let vals: Vec<f64> = c.runs.iter().filter_map(|r| r.band_map(t)).collect();
                if vals.is_empty() {
                    out.push_str(",n/a,n/a,0");
                } else {
                    let (m, s) = mean_std(&vals);
                    let _ = write!(out, ",{m:?},{s:?},{}", vals.len());
                }
            }
            out.push('\n');
        }
        out
    }

    /// Per-(cell, seed) metrics, one row each.
    pub fn per_seed_csv(&self) -> String {
        let mut out = String::from("cell,seed,map");
        for t in &self.bands {
            let _ = write!(out, ",few{t}");
        }
        out.push('\n');
        for c in &self.cells {
            for r in &c.runs {
                let _ = write!(out, "{},{},{:?}", c.cell.name(), r.seed, r.map.overall);
                for &t in &self.bands {
                    match r.band_map(t) {
                        Some(v) => {
                            let _ = write!(out, ",{v:?}");
                        }
                        None => out.push_str(",n/a"),
                    }
                }
                out.push('\n');
            }
        }
        out
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

/// Runs every cell for every seed. With `out`, writes `config.toml`,
/// `summary.csv`, `per_seed.csv` and per-run directories
/// `cells/<cell>/seed-<s>/` holding `report.toml`, `history.csv`,
/// `weights_before.txt`, `weights_after.txt`.
pub fn run_experiment(config: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentResult> {
    run_experiment_with(config, out, |_| {})
}

/// [`run_experiment`] with a callback after each finished run.
pub fn run_experiment_with(
    config: &ExperimentConfig,
    out: Option<&Path>,
    mut on_run: impl FnMut(&TrainReport),
) -> Result<ExperimentResult> {
    config.validate()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_file(&dir.join("config.toml"), &config.to_toml())?;
    }
    let cells = config.cells();
    let mut results: Vec<CellRuns> = cells
        .iter()
        .map(|&cell| CellRuns {
            cell,
            runs: Vec::new(),
        })
        .collect();
    for &seed in &config.seeds {
        let task = Task::generate(config, seed)?;
        for (k, &cell) in cells.iter().enumerate() {
            let report = run_cell(&task, cell, &config.train, seed)?;
            if let Some(dir) = out {
                let run_dir = dir.join("cells").join(cell.name()).join(format!("seed-{seed}"));
                write_file(&run_dir.join("report.toml"), &report.to_text(&task)?)?;
                write_file(&run_dir.join("history.csv"), &report.history_csv())?;
                write_file(&run_dir.join("weights_before.txt"), &report.initial.to_text(&task.taxonomy)?)?;
                write_file(&run_dir.join("weights_after.txt"), &report.classifier.to_text(&task.taxonomy)?)?;
            }
            on_run(&report);
            results[k].runs.push(report);
        }
    }
    let result = ExperimentResult {
        bands: config.bands.clone(),
        cells: results,
    };
    if let Some(dir) = out {
        write_file(&dir.join("summary.csv"), &result.summary_csv())?;
        write_file(&dir.join("per_seed.csv"), &result.per_seed_csv())?;
    }
    Ok(result)
}
