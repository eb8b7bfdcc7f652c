mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use modalseg_core::checkpoint::load_model;
use modalseg_core::dataio::{
    channel_index, class_index, generate_synthetic_dataset, Dataset, Split, CHANNEL_NAMES,
    CLASS_NAMES,
};
use modalseg_core::eval::{evaluate_rows, render_report, EvalRow, ReportFormat};
use modalseg_core::relevance::{export_heatmap, heatmap_stem, relevance_report};
use modalseg_core::trainer::{train, TrainConfig};
use modalseg_core::Error;

use config::CliConfig;

/// Exit codes.
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_EVAL: u8 = 5;

#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_IO,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::NonFinite(_) => EXIT_NUMERIC,
            Error::Eval(_) => EXIT_EVAL,
            Error::Config(_) | Error::Mask(_) | Error::Shape(_) => EXIT_USAGE,
            // file, format and checksum failures
            _ => EXIT_IO,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "modalseg",
    version,
    about = "Missing-modality tolerant multi-modal segmentation",
    after_help = "Settings come from built-in defaults, then the --config JSON file, then flags. \
MODALSEG_SEED supplies any seed the config file does not set.\n\
Exit codes: 0 ok, 2 usage or invalid configuration, 3 I/O, 4 non-finite loss, 5 evaluation failure."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic four-channel dataset with a train/test manifest.
    GenData(GenDataArgs),
    /// Train with modality drop and the adversarial bottleneck loss.
    Train(TrainArgs),
    /// Dice report for full input and each missing channel on the test split.
    Eval(EvalArgs),
    /// Weight-of-evidence heatmaps for one sample.
    Relevance(RelevanceArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// JSON configuration with optional sections data, model, train, odds
    /// [default: built-in defaults]
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output directory for manifest.json and samples/
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Generator seed [default: data.seed, else MODALSEG_SEED, else 1]
    #[arg(long)]
    seed: Option<u64>,
    /// Number of samples [default: data.count, else 500]
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Dataset directory [default: train.dataset, else ./data]
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Directory for metrics.jsonl and checkpoints
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Continue from a training checkpoint [default: start fresh]
    #[arg(long, value_name = "FILE")]
    resume: Option<PathBuf>,
    /// Training and initialization seed [default: train.seed, else MODALSEG_SEED, else 1]
    #[arg(long)]
    seed: Option<u64>,
    /// Total optimization steps [default: train.steps, else 2000]
    #[arg(long)]
    steps: Option<u64>,
    /// Batch size [default: train.batch_size, else 8]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Network learning rate [default: train.lr, else 0.001]
    #[arg(long)]
    lr: Option<f64>,
    /// Discriminator learning rate, 0 freezes it [default: train.d_lr, else 0.0002]
    #[arg(long)]
    d_lr: Option<f64>,
    /// Weight of the dropped-input segmentation loss [default: train.loss.alpha, else 1]
    #[arg(long)]
    alpha: Option<f64>,
    /// Weight of the adversarial bottleneck loss, 0 for the baseline [default: train.loss.beta, else 0.1]
    #[arg(long)]
    beta: Option<f64>,
    /// Steps between checkpoints, 0 for final only [default: train.checkpoint_interval, else 500]
    #[arg(long)]
    checkpoint_interval: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Model or training checkpoint
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Dataset directory [default: train.dataset, else ./data]
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Report format: text, csv or json
    #[arg(long, default_value = "text")]
    format: String,
    /// Rows to evaluate, repeatable: full or missing-{T1,T1c,T2,FLAIR} [default: all five]
    #[arg(long = "mask", value_name = "ROW")]
    masks: Vec<String>,
    /// Write the report here instead of stdout
    #[arg(long, value_name = "FILE")]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct RelevanceArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Model or training checkpoint
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Dataset directory [default: train.dataset, else ./data]
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Sample id [default: first test sample]
    #[arg(long)]
    sample: Option<String>,
    /// Only this channel: T1, T1c, T2 or FLAIR [default: all]
    #[arg(long)]
    channel: Option<String>,
    /// Only this class: BG, NCR, ED or ET [default: all]
    #[arg(long)]
    class: Option<String>,
    /// Probability clip before odds [default: odds.eps, else 1e-6]
    #[arg(long)]
    eps: Option<f64>,
    /// Output directory for .ppm and .wemp files
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

fn load_config(arg: &ConfigArg) -> Result<CliConfig, CliError> {
    let (mut cfg, explicit) = CliConfig::load(arg.config.as_deref())?;
    cfg.apply_seed_env(explicit)?;
    Ok(cfg)
}

fn dataset_dir(flag: Option<&PathBuf>, train: &TrainConfig) -> PathBuf {
    flag.cloned().unwrap_or_else(|| train.dataset.clone())
}

fn open_dataset(dir: &Path) -> Result<Dataset, CliError> {
    Dataset::open(dir)
        .map_err(|e| CliError::io(format!("cannot open dataset {}: {e}", dir.display())))
}

fn cmd_gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.data.seed = s;
    }
    if let Some(n) = args.count {
        cfg.data.count = n;
    }
    cfg.validate()?;
    let ds = generate_synthetic_dataset(&cfg.data, &args.out)?;
    println!(
        "wrote {} samples ({} train, {} test) to {} with seed {}",
        cfg.data.count,
        ds.manifest.train.len(),
        ds.manifest.test.len(),
        args.out.display(),
        cfg.data.seed
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.config)?;
    let t = &mut cfg.train;
    if let Some(v) = args.seed {
        t.seed = v;
    }
    if let Some(v) = args.steps {
        t.steps = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.lr {
        t.lr = v;
    }
    if let Some(v) = args.d_lr {
        t.d_lr = v;
    }
    if let Some(v) = args.alpha {
        t.loss.alpha = v;
    }
    if let Some(v) = args.beta {
        t.loss.beta = v;
    }
    if let Some(v) = args.checkpoint_interval {
        t.checkpoint_interval = v;
    }
    t.dataset = dataset_dir(args.data.as_ref(), t);
    cfg.validate()?;
    let ds = open_dataset(&cfg.train.dataset)?;
    if ds.manifest.train.is_empty() {
        return Err(CliError::usage("dataset has an empty train split"));
    }
    if let Some(r) = &args.resume {
        if !r.is_file() {
            return Err(CliError::io(format!(
                "checkpoint {} does not exist",
                r.display()
            )));
        }
    }
    let outcome = train(&cfg.model, &cfg.train, &args.out, args.resume.as_deref())?;
    println!(
        "trained to step {}; final checkpoint {}",
        outcome.state.step,
        outcome.final_checkpoint.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    cfg.validate()?;
    let format: ReportFormat = args
        .format
        .parse()
        .map_err(|e: Error| CliError::usage(e.to_string()))?;
    let params = load_model(&args.checkpoint)?;
    let rows = if args.masks.is_empty() {
        EvalRow::standard(params.config.channels)
    } else {
        args.masks
            .iter()
            .map(|m| {
                m.parse::<EvalRow>()
                    .map_err(|e| CliError::usage(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?
    };
    let ds = open_dataset(&dataset_dir(args.data.as_ref(), &cfg.train))?;
    let samples = ds.load(Split::Test)?;
    let report = evaluate_rows(&params, &samples, &rows)?;
    let text = render_report(&report, format)?;
    match &args.output {
        Some(path) => fs::write(path, text)
            .map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn lookup(
    kind: &str,
    name: &str,
    names: &[&str],
    find: fn(&str) -> Option<usize>,
) -> Result<usize, CliError> {
    find(name).ok_or_else(|| {
        CliError::usage(format!(
            "unknown {kind} {name:?}; valid names: {}",
            names.join(", ")
        ))
    })
}

fn cmd_relevance(args: RelevanceArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.config)?;
    if let Some(e) = args.eps {
        cfg.odds.eps = e;
    }
    cfg.validate()?;
    let channel = args
        .channel
        .as_deref()
        .map(|n| lookup("channel", n, &CHANNEL_NAMES, channel_index))
        .transpose()?;
    let class = args
        .class
        .as_deref()
        .map(|n| lookup("class", n, &CLASS_NAMES, class_index))
        .transpose()?;
    let params = load_model(&args.checkpoint)?;
    let ds = open_dataset(&dataset_dir(args.data.as_ref(), &cfg.train))?;
    let id = match &args.sample {
        Some(id) => id.clone(),
        None => ds
            .ids(Split::Test)
            .first()
            .cloned()
            .ok_or_else(|| CliError::usage("test split is empty; pass --sample"))?,
    };
    let sample = ds.load_one(&id)?;
    let map = relevance_report(&params, &sample, &cfg.odds)?;
    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::io(format!("cannot create {}: {e}", args.out.display())))?;
    let mut written = 0;
    for c in 0..map.channels {
        if channel.is_some_and(|x| x != c) {
            continue;
        }
        for j in 0..map.classes {
            if class.is_some_and(|x| x != j) {
                continue;
            }
            export_heatmap(
                map.get(c, j),
                map.height,
                map.width,
                &args.out,
                &heatmap_stem(&id, c, j),
            )?;
            written += 1;
        }
    }
    println!(
        "wrote {written} heatmaps for sample {id} to {}",
        args.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Relevance(a) => cmd_relevance(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
