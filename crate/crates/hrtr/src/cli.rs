//! Command implementations behind the `hrtr` binary.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{load_config, RunConfig};
use crate::data::{load_dataset, save_dataset, write_predictions, Dataset};
use crate::error::{HrtrError, Result};
use crate::metrics::{evaluate_with, oracle_probs, predict_probs, Aggregation, MetricsReport};
use crate::model::{ModelConfig, ModelParams};
use crate::optim::train;
use crate::synthgen::{generate, SynthSpec};
use crate::windowing::{SmoothSpec, WindowSpec};

#[derive(Parser)]
#[command(name = "hrtr", about = "Sub-second temporal action segmentation", version)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run config and write checkpoint + training log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split and print a JSON metrics report.
    Eval(EvalArgs),
    /// Write per-frame prediction CSVs for every trial in a split.
    Predict(PredictArgs),
    /// Train and evaluate over a grid of (window size, stride) pairs.
    Sweep(SweepArgs),
    /// Generate a synthetic dataset in the on-disk format.
    Gen(GenArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// Run config TOML; may name a preset via its `preset` key.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed (HRTR_SEED env var also overrides).
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: ConfigArg,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: ConfigArg,
    /// Checkpoint to evaluate; defaults to <output_dir>/checkpoint.ckpt.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Split to evaluate: train, val or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Smoothing kernel in frames; 0 disables. Overrides the config.
    #[arg(long)]
    smooth_window: Option<usize>,
    /// ES/AER aggregation: per_trial_mean or pooled.
    #[arg(long)]
    aggregation: Option<String>,
    /// Debug: substitute one-hot ground-truth labels for model predictions.
    #[arg(long, default_value_t = false)]
    oracle: bool,
    /// Also write the confusion matrix as CSV to this path.
    #[arg(long)]
    confusion_csv: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    common: ConfigArg,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Directory for per-trial CSVs; defaults to <output_dir>/predictions.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    smooth_window: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: ConfigArg,
    /// Comma-separated window sizes.
    #[arg(long, value_delimiter = ',', required = true)]
    window_sizes: Vec<usize>,
    /// Comma-separated strides, crossed with the window sizes.
    #[arg(long, value_delimiter = ',', required = true)]
    strides: Vec<usize>,
    /// CSV output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run sweep configurations on parallel threads.
    #[arg(long, default_value_t = false)]
    parallel: bool,
}

#[derive(Args)]
struct GenArgs {
    /// Synthetic dataset spec (TOML form of the generator parameters).
    #[arg(long)]
    spec: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Gen(args) => cmd_gen(args),
    };
    match result {
        Ok(()) => 0,
        Err(err) => {
            let kind = match err {
                HrtrError::Config(_) => "config",
                HrtrError::Numeric(_) => "numeric",
                _ => "data",
            };
            eprintln!("error[{kind}]: {err}");
            err.exit_code()
        }
    }
}

fn resolve_config(common: &ConfigArg) -> Result<RunConfig> {
    let mut config = load_config(&common.config)?;
    if let Ok(env_seed) = std::env::var("HRTR_SEED") {
        config.seed = env_seed
            .parse()
            .map_err(|_| HrtrError::Config(format!("HRTR_SEED is not an integer: {env_seed}")))?;
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(dir) = &common.output_dir {
        config.output_dir = dir.clone();
    }
    config.train.seed = config.seed;
    Ok(config)
}

fn load_run_dataset(config: &RunConfig) -> Result<Dataset> {
    load_dataset(
        &config.data.features_dir,
        &config.data.labels_dir,
        &config.data.vocab_file,
        &config.data.split_file,
    )
}

fn model_config(config: &RunConfig, dataset: &Dataset) -> ModelConfig {
    ModelConfig {
        input_dim: dataset.feature_dim(),
        embed_dim: config.model.embed_dim,
        num_layers: config.model.num_layers,
        num_heads: config.model.num_heads,
        ffn_hidden: config.model.ffn_hidden,
        dropout: config.model.dropout,
        num_classes: dataset.num_classes(),
    }
}

fn split_ids<'a>(dataset: &'a Dataset, split: &str) -> Result<&'a [String]> {
    match split {
        "train" => Ok(&dataset.split.train),
        "val" => Ok(&dataset.split.val),
        "test" => Ok(&dataset.split.test),
        other => Err(HrtrError::Config(format!(
            "unknown split '{other}' (expected train, val or test)"
        ))),
    }
}

fn checkpoint_path(config: &RunConfig, explicit: &Option<PathBuf>) -> PathBuf {
    explicit
        .clone()
        .unwrap_or_else(|| config.output_dir.join("checkpoint.ckpt"))
}

fn smooth_override(config: &RunConfig, flag: Option<usize>) -> Option<SmoothSpec> {
    match flag {
        Some(0) => None,
        Some(k) => Some(SmoothSpec { kernel: k }),
        None => config.smooth_spec(),
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let config = resolve_config(&args.common)?;
    let dataset = load_run_dataset(&config)?;
    let mc = model_config(&config, &dataset);
    let (mut params, log) = train(&dataset, &mc, &config.train, &config.window, &config.focal)?;
    fs::create_dir_all(&config.output_dir)?;
    let ckpt = config.output_dir.join("checkpoint.ckpt");
    params.save(&ckpt)?;
    let mut log_text = String::new();
    for record in &log {
        log_text.push_str(
            &serde_json::to_string(record).map_err(|e| HrtrError::Config(e.to_string()))?,
        );
        log_text.push('\n');
    }
    fs::write(config.output_dir.join("train_log.jsonl"), log_text)?;
    println!(
        "trained {} epochs, final loss {:.6}, checkpoint {}",
        log.len(),
        log.last().map(|r| r.train_loss).unwrap_or(f64::NAN),
        ckpt.display()
    );
    Ok(())
}

fn parse_aggregation(flag: &Option<String>, config: &RunConfig) -> Result<Aggregation> {
    match flag.as_deref() {
        None => Ok(config.eval.aggregation),
        Some("per_trial_mean") => Ok(Aggregation::PerTrialMean),
        Some("pooled") => Ok(Aggregation::Pooled),
        Some(other) => Err(HrtrError::Config(format!(
            "unknown aggregation '{other}' (expected per_trial_mean or pooled)"
        ))),
    }
}

fn run_report(
    dataset: &Dataset,
    config: &RunConfig,
    params: Option<&ModelParams>,
    ids: &[String],
    smooth: Option<SmoothSpec>,
    aggregation: Aggregation,
) -> Result<MetricsReport> {
    evaluate_with(
        dataset,
        ids,
        |id| match params {
            Some(p) => {
                let (features, _) = dataset.trial(id)?;
                predict_probs(p, features.features.view(), config.window.size)
            }
            None => oracle_probs(dataset, id),
        },
        smooth,
        aggregation,
    )
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let config = resolve_config(&args.common)?;
    let dataset = load_run_dataset(&config)?;
    let ids = split_ids(&dataset, &args.split)?.to_vec();
    let smooth = smooth_override(&config, args.smooth_window);
    let aggregation = parse_aggregation(&args.aggregation, &config)?;
    let params = if args.oracle {
        None
    } else {
        let path = checkpoint_path(&config, &args.checkpoint);
        let params = ModelParams::load(&path)?;
        if params.config.input_dim != dataset.feature_dim()
            || params.config.num_classes != dataset.num_classes()
        {
            return Err(HrtrError::Data(format!(
                "checkpoint expects D={} C={}, dataset has D={} C={}",
                params.config.input_dim,
                params.config.num_classes,
                dataset.feature_dim(),
                dataset.num_classes()
            )));
        }
        Some(params)
    };
    let report = run_report(&dataset, &config, params.as_ref(), &ids, smooth, aggregation)?;
    if let Some(path) = &args.confusion_csv {
        fs::write(
            path,
            crate::metrics::confusion_csv(&report.confusion, dataset.vocab.names()),
        )?;
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&report).map_err(|e| HrtrError::Config(e.to_string()))?
    );
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let config = resolve_config(&args.common)?;
    let dataset = load_run_dataset(&config)?;
    let ids = split_ids(&dataset, &args.split)?.to_vec();
    let params = ModelParams::load(&checkpoint_path(&config, &args.checkpoint))?;
    let smooth = smooth_override(&config, args.smooth_window);
    let out_dir = args
        .out
        .unwrap_or_else(|| config.output_dir.join("predictions"));
    fs::create_dir_all(&out_dir)?;
    for id in &ids {
        let (features, _) = dataset.trial(id)?;
        let mut probs = predict_probs(&params, features.features.view(), config.window.size)?;
        if let Some(spec) = smooth {
            probs = crate::windowing::smooth(probs.view(), &spec);
        }
        write_predictions(&out_dir.join(format!("{id}.csv")), probs.view(), &dataset.vocab)?;
    }
    println!("wrote {} prediction files to {}", ids.len(), out_dir.display());
    Ok(())
}

fn sweep_row(config: &RunConfig, dataset: &Dataset, w: usize, s: usize) -> String {
    let spec = WindowSpec { size: w, stride: s };
    let result = spec.validate().and_then(|()| {
        let mc = model_config(config, dataset);
        let (params, _) = train(dataset, &mc, &config.train, &spec, &config.focal)?;
        let ids = if dataset.split.test.is_empty() {
            &dataset.split.train
        } else {
            &dataset.split.test
        };
        crate::metrics::evaluate(
            dataset,
            ids,
            &params,
            &spec,
            config.smooth_spec(),
            config.eval.aggregation,
        )
    });
    match result {
        Ok(report) => format!("{w},{s},{:.4},{:.4},ok\n", report.edit_score, report.aer),
        Err(err) => format!("{w},{s},,,\"{err}\"\n"),
    }
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let config = resolve_config(&args.common)?;
    if args.window_sizes.is_empty() || args.strides.is_empty() {
        return Err(HrtrError::Config("window-sizes and strides must be non-empty".into()));
    }
    let dataset = load_run_dataset(&config)?;
    let mut grid = Vec::new();
    for &w in &args.window_sizes {
        for &s in &args.strides {
            if !grid.contains(&(w, s)) {
                grid.push((w, s));
            }
        }
    }
    let mut csv = String::from("window_size,stride,edit_score,aer,status\n");
    if args.parallel {
        let (config_ref, dataset_ref) = (&config, &dataset);
        let rows: Vec<String> = std::thread::scope(|scope| {
            let handles: Vec<_> = grid
                .iter()
                .map(|&(w, s)| scope.spawn(move || sweep_row(config_ref, dataset_ref, w, s)))
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        for row in rows {
            csv.push_str(&row);
        }
    } else {
        for &(w, s) in &grid {
            csv.push_str(&sweep_row(&config, &dataset, w, s));
        }
    }
    match &args.out {
        Some(path) => fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let text = fs::read_to_string(&args.spec)
        .map_err(|e| HrtrError::Config(format!("cannot read {}: {e}", args.spec.display())))?;
    let mut spec: SynthSpec =
        toml::from_str(&text).map_err(|e| HrtrError::Config(format!("config parse error: {e}")))?;
    if let Ok(env_seed) = std::env::var("HRTR_SEED") {
        spec.seed = env_seed
            .parse()
            .map_err(|_| HrtrError::Config(format!("HRTR_SEED is not an integer: {env_seed}")))?;
    }
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let dataset = generate(&spec)?;
    write_dataset_dir(&dataset, &args.out)?;
    println!(
        "generated {} trials in {}",
        spec.num_trials,
        args.out.display()
    );
    Ok(())
}

/// Standard dataset directory layout shared by `gen` and the tests:
/// features/, labels/, vocab.txt, split.txt.
pub fn write_dataset_dir(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_dataset(dataset, &dir.join("features"), &dir.join("labels"))?;
    dataset.vocab.save(&dir.join("vocab.txt"))?;
    dataset.split.save(&dir.join("split.txt"))?;
    Ok(())
}
