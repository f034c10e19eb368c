//! Command-line front end: `train`, `evaluate`, `ablate` and `explain`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{ConfigError, TrainConfig, Variant};
use crate::dataset::{make_folds, parse_tu_dataset, Dataset};
use crate::explain::{explain_graph, to_dot};
use crate::persist::{load_model, save_model};
use crate::pooling::EpsilonSchedule;
use crate::trainer::{
    ablation_config, cross_validate_with, evaluate, prepare, run_fold, EpochRecord, FoldResult, RunReport,
};

#[derive(Debug, Parser)]
#[command(
    name = "sugar",
    version,
    about = "Subgraph-level graph classification with adaptive pooling"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ten-fold cross-validation; writes report.json, trajectory.csv and one fold's model.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Fold whose trained model is saved.
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Scores a saved model on its held-out fold.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory holding model.bin; defaults to the output directory.
        #[arg(long)]
        model_dir: Option<PathBuf>,
        /// Fold to score; defaults to the fold the model was trained on.
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Runs all four variants on shared folds.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Exports the subgraphs behind one graph's prediction.
    Explain {
        #[command(flatten)]
        common: CommonArgs,
        /// Graph id (0-based position in the dataset).
        #[arg(long = "graph")]
        graph: usize,
        /// Directory holding model.bin; defaults to the output directory.
        #[arg(long)]
        model_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Args, Clone, Default)]
pub struct CommonArgs {
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// key=value file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub k0: Option<f64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub s: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub jobs: Option<usize>,
}

/// A failed command: message for standard error plus exit status.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn failure(message: impl std::fmt::Display) -> Self {
        Self {
            code: 1,
            message: message.to_string(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::usage(e.to_string())
    }
}

/// Fully resolved settings of one invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub dataset: String,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub jobs: usize,
    pub train: TrainConfig,
}

const PLUMBING_KEYS: [&str; 4] = ["dataset", "data_dir", "out_dir", "jobs"];

/// Parses `key = value` lines; `#` starts a comment. Keys may use `-` or `_`.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("line {}: expected key=value, got {raw:?}", no + 1)))?;
        let key = key.trim().replace('-', "_");
        if out.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(ConfigError(format!("line {}: duplicate key {key:?}", no + 1)));
        }
    }
    Ok(out)
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| ConfigError(format!("{key}: cannot parse {value:?}: {e}")))
}

/// Applies one training key to `cfg`. Unknown keys are rejected.
pub fn apply_key(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<(), ConfigError> {
    match key {
        "n" => cfg.n = parse_value(key, value)?,
        "s" => cfg.s = parse_value(key, value)?,
        "k0" => cfg.k0 = parse_value(key, value)?,
        "dk" => cfg.dk = Some(parse_value(key, value)?),
        "b_com" => cfg.b_com = parse_value(key, value)?,
        "d1" => cfg.d1 = parse_value(key, value)?,
        "d2" => cfg.d2 = parse_value(key, value)?,
        "heads" | "m" => cfg.heads = parse_value(key, value)?,
        "encoder_layers" => cfg.encoder_layers = parse_value(key, value)?,
        "beta" => cfg.beta = parse_value(key, value)?,
        "lambda" => cfg.lambda = parse_value(key, value)?,
        "lr" => cfg.lr = parse_value(key, value)?,
        "momentum" => cfg.momentum = parse_value(key, value)?,
        "dropout" => cfg.dropout = parse_value(key, value)?,
        "epochs" => cfg.epochs = parse_value(key, value)?,
        "patience" => cfg.patience = parse_value(key, value)?,
        "batch_size" => cfg.batch_size = parse_value(key, value)?,
        "seed" => cfg.seed = parse_value(key, value)?,
        "variant" => cfg.variant = parse_value(key, value)?,
        "gamma" => cfg.gamma = parse_value(key, value)?,
        "alpha" => cfg.alpha = parse_value(key, value)?,
        "epsilon_start" => cfg.epsilon.start = parse_value(key, value)?,
        "epsilon_end" => cfg.epsilon.end = parse_value(key, value)?,
        "epsilon_steps" => cfg.epsilon.steps = parse_value(key, value)?,
        "epsilon" => cfg.epsilon = EpsilonSchedule::constant(parse_value(key, value)?),
        _ => return Err(ConfigError(format!("unknown configuration key {key:?}"))),
    }
    Ok(())
}

/// Merges defaults, the config file and flags, in increasing precedence.
pub fn resolve(common: &CommonArgs) -> Result<Settings, CliError> {
    let file = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
            parse_config_text(&text)?
        }
        None => BTreeMap::new(),
    };
    let dataset = common
        .dataset
        .clone()
        .or_else(|| file.get("dataset").cloned())
        .ok_or_else(|| CliError::usage("no dataset given (use --dataset or dataset= in the config file)"))?;
    let data_dir = common
        .data_dir
        .clone()
        .or_else(|| file.get("data_dir").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"));
    let out_dir = common
        .out_dir
        .clone()
        .or_else(|| file.get("out_dir").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));

    let mut train = TrainConfig::for_dataset(&dataset);
    let mut jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    for (key, value) in &file {
        if key == "jobs" {
            jobs = parse_value(key, value)?;
        } else if !PLUMBING_KEYS.contains(&key.as_str()) {
            apply_key(&mut train, key, value)?;
        }
    }
    if let Some(v) = common.seed {
        train.seed = v;
    }
    if let Some(v) = common.variant {
        train.variant = v;
    }
    if let Some(v) = common.epochs {
        train.epochs = v;
    }
    if let Some(v) = common.k0 {
        train.k0 = v;
    }
    if let Some(v) = common.n {
        train.n = v;
    }
    if let Some(v) = common.s {
        train.s = v;
    }
    if let Some(v) = common.beta {
        train.beta = v;
    }
    if let Some(v) = common.jobs {
        jobs = v;
    }
    if jobs == 0 {
        return Err(CliError::usage("jobs must be at least 1"));
    }
    train.validate()?;
    Ok(Settings {
        dataset,
        data_dir,
        out_dir,
        jobs,
        train,
    })
}

fn load_dataset(settings: &Settings) -> Result<Dataset, CliError> {
    if !settings.data_dir.is_dir() {
        return Err(CliError::usage(format!(
            "dataset directory {} does not exist",
            settings.data_dir.display()
        )));
    }
    parse_tu_dataset(&settings.data_dir, &settings.dataset).map_err(|e| match e {
        crate::dataset::DataError::MissingFile(path) => {
            CliError::usage(format!("dataset file {} does not exist", path.display()))
        }
        other => CliError::failure(other),
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::failure(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::failure(format!("{}: {e}", path.display())))
}

fn json_text<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    text
}

/// CSV of epoch records; `variant` adds a leading column when set.
pub fn trajectory_csv(records: &[EpochRecord], variant: Option<Variant>) -> String {
    let mut out = String::new();
    if variant.is_some() {
        out.push_str("variant,");
    }
    out.push_str("fold,epoch,loss,train_acc,k,reward,terminated\n");
    for r in records {
        if let Some(v) = variant {
            let _ = write!(out, "{v},");
        }
        let reward = r.reward.map(|x| x.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.fold, r.epoch, r.loss, r.train_acc, r.k, reward, r.terminated
        );
    }
    out
}

/// One-line `mean ± std` summary in percent.
pub fn summary_line(report: &RunReport) -> String {
    format!(
        "{} {}: {:.2} ± {:.2} (10-fold accuracy, %)",
        report.dataset,
        report.variant,
        100.0 * report.mean,
        100.0 * report.std
    )
}

fn cmd_train(common: &CommonArgs, save_fold: usize) -> Result<(), CliError> {
    let settings = resolve(common)?;
    let dataset = load_dataset(&settings)?;
    let cfg = &settings.train;
    let plan = make_folds(&dataset.graphs, cfg.seed).map_err(CliError::failure)?;
    if save_fold >= plan.fold_count {
        return Err(CliError::usage(format!("fold must be below {}", plan.fold_count)));
    }
    let data = prepare(&dataset.graphs, cfg.n, cfg.s).map_err(CliError::failure)?;
    let kept = Mutex::new(None);
    let report = cross_validate_with(&dataset, cfg, &plan, settings.jobs, |fold, train, test| {
        let (trained, summary) = run_fold(&dataset, &data, cfg, fold, train, test)?;
        let trajectory = trained.trajectory.clone();
        if fold == save_fold {
            *kept.lock().expect("no poisoned lock") = Some(trained);
        }
        Ok(FoldResult { summary, trajectory })
    })
    .map_err(CliError::failure)?;

    let out = &settings.out_dir;
    write_text(&out.join("report.json"), &json_text(&report))?;
    write_text(&out.join("trajectory.csv"), &trajectory_csv(&report.trajectories, None))?;
    let fold_model = kept
        .into_inner()
        .expect("no poisoned lock")
        .expect("saved fold was trained");
    save_model(out, &fold_model.model, cfg, &dataset.name, save_fold, fold_model.k).map_err(CliError::failure)?;
    println!("{}", summary_line(&report));
    println!("wall clock {:.1}s", report.wall_clock_secs);
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvaluationReport {
    schema_version: u32,
    dataset: String,
    fold: usize,
    k: f64,
    test_size: usize,
    accuracy: f64,
}

fn cmd_evaluate(common: &CommonArgs, model_dir: Option<&Path>, fold: Option<usize>) -> Result<(), CliError> {
    let settings = resolve(common)?;
    let dataset = load_dataset(&settings)?;
    let dir = model_dir.unwrap_or(&settings.out_dir);
    let (model, manifest) = load_model(dir).map_err(CliError::failure)?;
    let cfg = &manifest.config;
    let fold = fold.unwrap_or(manifest.fold);
    let plan = make_folds(&dataset.graphs, cfg.seed).map_err(CliError::failure)?;
    if fold >= plan.fold_count {
        return Err(CliError::usage(format!("fold must be below {}", plan.fold_count)));
    }
    let data = prepare(&dataset.graphs, cfg.n, cfg.s).map_err(CliError::failure)?;
    let test = plan.test_ids(fold);
    let accuracy = evaluate(&model, &data, &test, manifest.k, cfg.b_com).map_err(CliError::failure)?;
    let report = EvaluationReport {
        schema_version: 1,
        dataset: dataset.name.clone(),
        fold,
        k: manifest.k,
        test_size: test.len(),
        accuracy,
    };
    write_text(&settings.out_dir.join("evaluation.json"), &json_text(&report))?;
    println!(
        "{} fold {fold}: accuracy {:.2}% on {} graphs",
        dataset.name,
        100.0 * accuracy,
        test.len()
    );
    Ok(())
}

fn cmd_ablate(common: &CommonArgs) -> Result<(), CliError> {
    let settings = resolve(common)?;
    let dataset = load_dataset(&settings)?;
    let base = &settings.train;
    let plan = make_folds(&dataset.graphs, base.seed).map_err(CliError::failure)?;
    let mut csv = String::from("variant,mean,std,pooled_accuracy");
    for f in 0..plan.fold_count {
        let _ = write!(csv, ",fold{f}");
    }
    csv.push('\n');
    let mut summary = format!("Ablation on {} (seed {})\n", dataset.name, base.seed);
    let mut trajectories = String::new();
    for variant in Variant::ALL {
        let cfg = ablation_config(base, variant);
        let data = prepare(&dataset.graphs, cfg.n, cfg.s).map_err(CliError::failure)?;
        let report = cross_validate_with(&dataset, &cfg, &plan, settings.jobs, |fold, train, test| {
            let (trained, summary) = run_fold(&dataset, &data, &cfg, fold, train, test)?;
            Ok(FoldResult {
                summary,
                trajectory: trained.trajectory,
            })
        })
        .map_err(CliError::failure)?;
        let _ = write!(
            csv,
            "{variant},{},{},{}",
            report.mean, report.std, report.pooled_accuracy
        );
        for acc in &report.fold_accuracies {
            let _ = write!(csv, ",{acc}");
        }
        csv.push('\n');
        let _ = writeln!(summary, "{}", summary_line(&report));
        let block = trajectory_csv(&report.trajectories, Some(variant));
        if trajectories.is_empty() {
            trajectories.push_str(&block);
        } else {
            trajectories.extend(block.lines().skip(1).map(|l| format!("{l}\n")));
        }
    }
    let out = &settings.out_dir;
    write_text(&out.join("ablation.csv"), &csv)?;
    write_text(&out.join("ablation_summary.txt"), &summary)?;
    write_text(&out.join("ablation_trajectory.csv"), &trajectories)?;
    print!("{summary}");
    Ok(())
}

fn cmd_explain(common: &CommonArgs, graph: usize, model_dir: Option<&Path>) -> Result<(), CliError> {
    let settings = resolve(common)?;
    let dataset = load_dataset(&settings)?;
    if graph >= dataset.graphs.len() {
        return Err(CliError::usage(format!(
            "unknown graph id {graph}: {} has graphs 0..{}",
            dataset.name,
            dataset.graphs.len()
        )));
    }
    let dir = model_dir.unwrap_or(&settings.out_dir);
    let (model, manifest) = load_model(dir).map_err(CliError::failure)?;
    let cfg = &manifest.config;
    let item = prepare(&dataset.graphs[graph..=graph], cfg.n, cfg.s)
        .map_err(CliError::failure)?
        .remove(0);
    let ex = explain_graph(&model, &item, manifest.k, cfg.b_com).map_err(CliError::failure)?;
    let names = dataset.node_label_values.as_deref();
    let out = &settings.out_dir;
    write_text(&out.join(format!("graph_{graph}.json")), &json_text(&ex))?;
    write_text(&out.join(format!("graph_{graph}.dot")), &to_dot(&ex, &item, names))?;
    println!(
        "graph {graph}: label {} predicted {} with {} of {} subgraphs kept",
        ex.label,
        ex.predicted,
        ex.selected.len(),
        item.subgraphs.subgraphs.len()
    );
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { common, fold } => cmd_train(&common, fold),
        Command::Evaluate {
            common,
            model_dir,
            fold,
        } => cmd_evaluate(&common, model_dir.as_deref(), fold),
        Command::Ablate { common } => cmd_ablate(&common),
        Command::Explain {
            common,
            graph,
            model_dir,
        } => cmd_explain(&common, graph, model_dir.as_deref()),
    }
}
