mod commands;
mod runlog;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fiberseg::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "fiberseg", version, about = "Fiber bundle detection on tracer-stained sections")]
pub struct Cli {
    /// Base directory for relative paths.
    #[arg(long, global = true, env = "FIBERSEG_DATA_ROOT", value_name = "DIR")]
    pub data_root: Option<PathBuf>,
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Master seed for every random component.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-section stages.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub jobs: u64,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic labeled stack.
    Synth(SynthArgs),
    /// Train the segmentation model (and the continuity prior).
    Train(TrainArgs),
    /// Predict probability maps and regions.
    Infer(InferArgs),
    /// Apply the continuity filter and postprocessing to detections.
    Filter(FilterArgs),
    /// Score detections against the charting.
    Eval(EvalArgs),
    /// FROC analysis over probability maps.
    Froc(FrocArgs),
    /// Train and score the loss/TE ablation variants.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub sections: Option<usize>,
    /// Keep the charting of every k-th section only.
    #[arg(long)]
    pub charted_stride: Option<usize>,
    /// Small 128x160 sections for quick experiments.
    #[arg(long)]
    pub tiny: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Skip temporal ensembling.
    #[arg(long)]
    pub pretrain_only: bool,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub te_epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub base_width: Option<usize>,
    /// Do not train the continuity prior.
    #[arg(long)]
    pub no_prior: bool,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub threshold: Option<f32>,
}

#[derive(Args, Debug)]
pub struct PriorArgs {
    /// Use dilated ground-truth dense bundles as the prior.
    #[arg(long, conflicts_with = "prior")]
    pub oracle_prior: bool,
    /// Trained prior checkpoint.
    #[arg(long, value_name = "FILE")]
    pub prior: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FilterArgs {
    /// Directory written by `infer`.
    #[arg(long, value_name = "DIR")]
    pub detections: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[command(flatten)]
    pub prior: PriorArgs,
    #[arg(long)]
    pub max_distance_um: Option<f64>,
    #[arg(long)]
    pub min_area_mm2: Option<f64>,
    #[arg(long)]
    pub boundary_margin_mm: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of `<section>.regions.json` files.
    #[arg(long, value_name = "DIR")]
    pub pred: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Match by IoU >= this value instead of any overlap.
    #[arg(long)]
    pub iou_min: Option<f64>,
}

#[derive(Args, Debug)]
pub struct FrocArgs {
    /// Directory of `<section>.prob.tiff` maps written by `infer`.
    #[arg(long, value_name = "DIR")]
    pub pred: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[command(flatten)]
    pub prior: PriorArgs,
    /// Skip the continuity filter and postprocessing.
    #[arg(long)]
    pub no_filter: bool,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Training stack.
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    /// Held-out stack with full charting.
    #[arg(long, value_name = "FILE")]
    pub test_manifest: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Comma-separated subset of ce, focal, focal+sscon, focal+sscon+te.
    #[arg(long, value_delimiter = ',', default_value = "ce,focal,focal+sscon,focal+sscon+te")]
    pub variants: Vec<String>,
    #[arg(long)]
    pub oracle_prior: bool,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub te_epochs: Option<usize>,
}

/// Usage errors exit with 2, runtime failures with 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Shared context: resolved paths, merged config, thread budget.
pub struct Ctx {
    pub data_root: Option<PathBuf>,
    pub config: RunConfig,
    pub jobs: usize,
    pub argv: Vec<String>,
}

impl Ctx {
    pub fn path(&self, p: &Path) -> PathBuf {
        match &self.data_root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// Resolves a required input path, naming the flag when it is absent.
    pub fn input(&self, flag: &str, p: &Option<PathBuf>) -> CliResult<PathBuf> {
        let p = p.as_ref().ok_or_else(|| usage(format!("missing required flag {flag}")))?;
        let full = self.path(p);
        if !full.exists() {
            return Err(usage(format!("{flag}: no such file or directory: {}", full.display())));
        }
        Ok(full)
    }
}

fn load_config(cli: &Cli, root: &Option<PathBuf>) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let p = match root {
                Some(r) if p.is_relative() => r.join(p),
                _ => p.clone(),
            };
            let text = std::fs::read_to_string(&p).map_err(|e| usage(format!("--config {}: {e}", p.display())))?;
            RunConfig::from_json(&text).map_err(|e| usage(format!("--config {}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.version = fiberseg::config::VERSION.to_string();
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    let config = load_config(&cli, &cli.data_root)?;
    let mut ctx = Ctx {
        data_root: cli.data_root.clone(),
        config,
        jobs: cli.jobs as usize,
        argv: std::env::args().collect(),
    };
    match &cli.command {
        Command::Synth(a) => commands::synth(&mut ctx, a),
        Command::Train(a) => commands::train(&mut ctx, a),
        Command::Infer(a) => commands::infer(&mut ctx, a),
        Command::Filter(a) => commands::filter(&mut ctx, a),
        Command::Eval(a) => commands::eval(&mut ctx, a),
        Command::Froc(a) => commands::froc(&mut ctx, a),
        Command::Ablate(a) => commands::ablate(&mut ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
