use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use hoi_core::attention::{
    cls_attention, masked_cls_attention, patch_mask_with, AttentionInput, InclusionRule, PatchGrid,
};
use hoi_core::classifier::{InitStrategy, LinearClassifier};
use hoi_core::data::Dataset;
use hoi_core::eval::{mean_ap, BBox, MapReport};
use hoi_core::experiment::{run_cell, run_experiment_with, Cell, ExperimentConfig, Grid, Task, TrainReport};
use hoi_core::losses::LossKind;
use hoi_core::taxonomy::{tag_frequency_bands, FrequencyBands, Taxonomy};
use hoi_core::train::score_dataset;
use hoi_core::{Error, Result};

#[derive(Parser)]
#[command(name = "hoi", version, about = "Long-tail HOI classifier experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Seed; for sweeps it replaces the configured seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// TOML config file; defaults are used for anything it omits.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate taxonomy, embeddings and train/test datasets.
    GenData(Common),
    /// Train a single (init, loss, gamma) cell.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_init, default_value = "embedding")]
        init: InitStrategy,
        #[arg(long, value_parser = parse_loss)]
        loss: Option<LossKind>,
        #[arg(long, default_value_t = 100.0)]
        gamma: f64,
    },
    /// Run the configured grid over all seeds.
    Sweep(Common),
    /// Score a checkpoint on a dataset file.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        taxonomy: PathBuf,
        /// Dataset to evaluate on.
        #[arg(long)]
        data: PathBuf,
        /// Training set whose counts define few-shot bands.
        #[arg(long)]
        train_data: Option<PathBuf>,
    },
    /// Print unmasked and box-masked CLS attention over a patch grid.
    MaskDemo {
        #[command(flatten)]
        common: Common,
        /// File with one "x_min y_min x_max y_max" box per line.
        #[arg(long)]
        boxes: PathBuf,
    },
    /// Sweep the logit scale with embedding init.
    GammaAblate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [50.0, 100.0, 150.0, 300.0, 500.0])]
        gammas: Vec<f64>,
    },
}

fn parse_init(s: &str) -> std::result::Result<InitStrategy, String> {
    match s {
        "embedding" => Ok(InitStrategy::Embedding),
        "random" => Ok(InitStrategy::Random),
        _ => Err(format!("unknown init '{s}' (embedding|random)")),
    }
}

fn parse_loss(s: &str) -> std::result::Result<LossKind, String> {
    LossKind::parse(s).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hoi: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(c) => gen_data(&c),
        Command::Train {
            common,
            init,
            loss,
            gamma,
        } => train_one(&common, init, loss, gamma),
        Command::Sweep(c) => {
            let cfg = experiment_config(&c, true)?;
            sweep(&cfg, c.out.as_deref())
        }
        Command::Eval {
            common,
            checkpoint,
            taxonomy,
            data,
            train_data,
        } => eval(&common, &checkpoint, &taxonomy, &data, train_data.as_deref()),
        Command::MaskDemo { common, boxes } => mask_demo(&common, &boxes),
        Command::GammaAblate { common, gammas } => {
            let mut cfg = experiment_config(&common, true)?;
            cfg.grid = Grid {
                inits: vec![InitStrategy::Embedding],
                losses: vec![cfg.train.loss],
                gammas,
            };
            cfg.extra_cells.clear();
            cfg.validate()?;
            sweep(&cfg, common.out.as_deref())
        }
    }
}

fn experiment_config(c: &Common, seed_overrides_list: bool) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| with_path(e, p))?,
        None => ExperimentConfig::default(),
    };
    if let (Some(s), true) = (c.seed, seed_overrides_list) {
        cfg.seeds = vec![s];
    }
    Ok(cfg)
}

fn with_path(e: Error, p: &Path) -> Error {
    match e {
        Error::Io(io) => Error::Argument(format!("{}: {io}", p.display())),
        other => other,
    }
}

fn open(p: &Path) -> Result<BufReader<fs::File>> {
    fs::File::open(p)
        .map(BufReader::new)
        .map_err(|e| Error::Argument(format!("{}: {e}", p.display())))
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn seed_of(c: &Common, cfg: &ExperimentConfig) -> u64 {
    c.seed.unwrap_or(cfg.seeds[0])
}

fn gen_data(c: &Common) -> Result<()> {
    let cfg = experiment_config(c, false)?;
    let seed = seed_of(c, &cfg);
    let task = Task::generate(&cfg, seed)?;
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from("."));
    write(&out, "taxonomy.txt", &task.taxonomy.to_text())?;
    write(&out, "embeddings.txt", &task.embeddings.to_text(&task.taxonomy)?)?;
    write(&out, "train.txt", &task.train.to_text())?;
    write(&out, "test.txt", &task.test.to_text())?;
    println!(
        "seed {seed}: {} classes, {} train / {} test samples -> {}",
        task.taxonomy.n_classes(),
        task.train.len(),
        task.test.len(),
        out.display()
    );
    Ok(())
}

fn print_map(prefix: &str, map: &MapReport) {
    let bands: Vec<String> = map
        .bands
        .iter()
        .map(|b| match b.map {
            Some(v) => format!("few@{}={v:.4}", b.threshold),
            None => format!("few@{}=n/a", b.threshold),
        })
        .collect();
    println!(
        "{prefix}map={:.6} classes={} {}",
        map.overall,
        map.n_defined,
        bands.join(" ")
    );
}

fn train_one(c: &Common, init: InitStrategy, loss: Option<LossKind>, gamma: f64) -> Result<()> {
    let cfg = experiment_config(c, false)?;
    cfg.validate()?;
    let seed = seed_of(c, &cfg);
    let cell = Cell {
        init,
        loss: loss.unwrap_or(cfg.train.loss),
        gamma,
    };
    let task = Task::generate(&cfg, seed)?;
    let report = run_cell(&task, cell, &cfg.train, seed)?;
    if let Some(out) = &c.out {
        write(out, "config.toml", &cfg.to_toml())?;
        write(out, "taxonomy.txt", &task.taxonomy.to_text())?;
        write(out, "train.txt", &task.train.to_text())?;
        write(out, "test.txt", &task.test.to_text())?;
        write_run(out, &report, &task)?;
    }
    print_map(&format!("{} seed={seed} ", cell.name()), &report.map);
    Ok(())
}

fn write_run(dir: &Path, report: &TrainReport, task: &Task) -> Result<()> {
    write(dir, "report.toml", &report.to_text(task)?)?;
    write(dir, "history.csv", &report.history_csv())?;
    write(dir, "weights_before.txt", &report.initial.to_text(&task.taxonomy)?)?;
    write(dir, "weights_after.txt", &report.classifier.to_text(&task.taxonomy)?)
}

fn sweep(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<()> {
    let result = run_experiment_with(cfg, out, |r| {
        eprintln!("{} seed={} map={:.6}", r.cell.name(), r.seed, r.map.overall);
    })?;
    print!("{}", result.summary_csv());
    Ok(())
}

fn eval(c: &Common, checkpoint: &Path, taxonomy: &Path, data: &Path, train_data: Option<&Path>) -> Result<()> {
    let cfg = experiment_config(c, false)?;
    let tax = Taxonomy::from_text(open(taxonomy)?)?;
    let clf = LinearClassifier::from_text(open(checkpoint)?, &tax)?;
    let test = Dataset::from_text(open(data)?)?;
    let bands = match train_data {
        Some(p) => {
            let train = Dataset::from_text(open(p)?)?;
            tag_frequency_bands(&tax, train.train_counts(), &cfg.bands)?
        }
        None => FrequencyBands::empty(),
    };
    let scores = score_dataset(&clf, &test)?;
    let labels: Vec<_> = test.samples().iter().map(|s| s.labels.clone()).collect();
    let map = mean_ap(&scores, &labels, &bands)?;
    if let Some(out) = &c.out {
        let mut text = format!("map = {:?}\nn_defined = {}\n", map.overall, map.n_defined);
        for b in &map.bands {
            match b.map {
                Some(v) => text.push_str(&format!("few{} = {v:?}\n", b.threshold)),
                None => text.push_str(&format!("# few{}: no defined classes\n", b.threshold)),
            }
        }
        write(out, "eval.toml", &text)?;
    }
    print_map("", &map);
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct MaskDemoConfig {
    width: u32,
    height: u32,
    patch: u32,
    d_k: usize,
    rule: InclusionRule,
}

impl Default for MaskDemoConfig {
    fn default() -> Self {
        MaskDemoConfig {
            width: 224,
            height: 224,
            patch: 32,
            d_k: 16,
            rule: InclusionRule::AnyOverlap,
        }
    }
}

fn mask_demo(c: &Common, boxes: &Path) -> Result<()> {
    let cfg: MaskDemoConfig = match &c.config {
        Some(p) => toml::from_str(&fs::read_to_string(p).map_err(|e| with_path(e.into(), p))?).map_err(|e| {
            Error::Config {
                field: "<document>".into(),
                reason: e.to_string(),
            }
        })?,
        None => MaskDemoConfig::default(),
    };
    let grid = PatchGrid::new(cfg.width, cfg.height, cfg.patch)?;
    let boxes = BBox::parse_list(open(boxes)?)?;
    let mask = patch_mask_with(&boxes, &grid, cfg.rule)?;

    // Random token projections stand in for a backbone's queries/keys/values.
    let n_tokens = grid.n_patches() + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed.unwrap_or(0));
    rng.set_stream(0xde40);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let (q, k, v) = (
        draw(n_tokens * cfg.d_k),
        draw(n_tokens * cfg.d_k),
        draw(n_tokens * cfg.d_k),
    );
    let input = AttentionInput::new(n_tokens, cfg.d_k, cfg.d_k, q, k, v)?;
    let plain = cls_attention(&input);
    let masked = masked_cls_attention(&input, &mask)?;

    let mut table = String::from("token,row,col,in_region,unmasked,masked\n");
    table.push_str(&format!("cls,-,-,true,{:?},{:?}\n", plain.weights[0], masked.weights[0]));
    for p in 0..grid.n_patches() {
        table.push_str(&format!(
            "{},{},{},{},{:?},{:?}\n",
            p + 1,
            p / grid.cols(),
            p % grid.cols(),
            mask.in_region()[p],
            plain.weights[p + 1],
            masked.weights[p + 1]
        ));
    }
    if let Some(out) = &c.out {
        write(out, "attention.csv", &table)?;
    }
    print!("{table}");
    Ok(())
}
