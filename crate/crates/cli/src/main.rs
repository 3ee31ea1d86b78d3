//! `milslide`: tile → embed → split → train → eval → heatmap / export pipeline.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use milslide::mil::CHECKPOINT_VERSION;
use milslide::store::BAG_VERSION;
use milslide::train::{LossKind, Task};

#[derive(Debug, Parser)]
#[command(name = "milslide", about = "Attention MIL for whole-slide images")]
pub struct Cli {
    /// Worker threads for parallel sections; outputs do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Repeat for more log output (warn, info, debug, trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cut an image into tissue tiles written as `x{col}_y{row}.png`.
    Tile(TileArgs),
    /// Embed a tile directory into a MILB bag with the mock encoder.
    Embed(EmbedArgs),
    /// Generate planted-signal synthetic bags.
    Synth(SynthArgs),
    /// Write a stratified train/valid/test manifest for a bag directory.
    Split(SplitArgs),
    /// Train a classifier or regressor from a manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one manifest split.
    Eval(EvalArgs),
    /// Render an attention heatmap for one bag.
    Heatmap(HeatmapArgs),
    /// Write pooled slide features as CSV.
    ExportFeatures(ExportArgs),
}

#[derive(Debug, Args)]
pub struct TileArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = milslide::tiler::DEFAULT_TILE_PX)]
    pub tile: u32,
    #[arg(long, default_value_t = milslide::tiler::DEFAULT_LEVEL_SCALE)]
    pub scale: f64,
    #[arg(long, default_value_t = milslide::tiler::DEFAULT_MIN_TISSUE)]
    pub min_tissue: f64,
    /// Extract tiles on one thread.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    /// Tile directory produced by `tile`.
    #[arg(long)]
    pub dir: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to the tile directory name.
    #[arg(long)]
    pub slide_id: Option<String>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=3))]
    pub mir_stage: Option<u8>,
    #[arg(long)]
    pub wbc: Option<f32>,
    #[arg(long)]
    pub tmax: Option<f32>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub bags: usize,
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    /// Planted fraction range of positive bags, `lo:hi`.
    #[arg(long, default_value = "0.05:0.15", value_parser = parse_range)]
    pub pos_frac: (f64, f64),
    #[arg(long, default_value_t = 1.0)]
    pub shift: f64,
    #[arg(long, default_value_t = 8)]
    pub signal_dims: usize,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    /// Emit regression bags labelled with this target instead.
    #[arg(long, value_parser = parse_regression_task)]
    pub regression: Option<Task>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub dir: PathBuf,
    /// Train, valid and test fractions, `a:b:c`.
    #[arg(long, default_value = "0.6:0.2:0.2", value_parser = parse_fractions)]
    pub frac: [f64; 3],
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Defaults to `<dir>/manifest.tsv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "mir")]
    pub task: Task,
    /// Defaults to hinge for mir and mse for regression tasks.
    #[arg(long)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub class_weights: bool,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    #[arg(long, default_value_t = milslide::mil::DEFAULT_HIDDEN)]
    pub hidden: usize,
    #[arg(long, default_value_t = milslide::mil::DEFAULT_ATTENTION)]
    pub attention: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Epoch log CSV; defaults to the checkpoint path with `.epochs.csv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: milslide::Split,
    #[arg(long, default_value = "mir")]
    pub task: Task,
    /// Metrics CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-slide predictions CSV.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub bag: PathBuf,
    /// Attention branch; classifiers have 0 and 1, regressors only 0.
    #[arg(long, default_value_t = 1)]
    pub branch: usize,
    #[arg(long, default_value_t = 8)]
    pub upscale: u32,
    /// Grid sidecar from `tile`; otherwise the grid is the bag's coordinate extent.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Tile directory to copy the top-k patches from.
    #[arg(long, requires = "topk_out")]
    pub tiles: Option<PathBuf>,
    #[arg(long, requires = "tiles")]
    pub topk_out: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: milslide::Split,
    #[arg(long, default_value_t = 1)]
    pub branch: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(':').ok_or("expected lo:hi")?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("{e}"))?;
    Ok((lo, hi))
}

fn parse_fractions(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{e}")))
        .collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|_| "expected train:valid:test".to_string())
}

fn parse_regression_task(s: &str) -> Result<Task, String> {
    match s.parse::<Task>() {
        Ok(t) if !t.is_classification() => Ok(t),
        Ok(_) => Err("regression target must be wbc or tmax".into()),
        Err(e) => Err(e.to_string()),
    }
}

fn version_string() -> String {
    format!(
        "{} (MILB {BAG_VERSION}, MILW {CHECKPOINT_VERSION})",
        env!("CARGO_PKG_VERSION")
    )
}

fn main() -> ExitCode {
    let version: &'static str = Box::leak(version_string().into_boxed_str());
    let matches = match Cli::command().version(version).try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::warn!("thread pool: {e}");
        }
    }
    log::info!("milslide {}", version_string());
    log::info!("resolved config: {cli:?}");
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
