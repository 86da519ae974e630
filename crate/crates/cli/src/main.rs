mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use perfcnn::masks::MaskKind;
use perfcnn::perfconv::{Interpolation, Storage};
use perfcnn::rate::Rate;
use perfcnn::search::CostModel;

/// Perforated CNN experiments.
#[derive(Parser, Debug)]
#[command(name = "perfcnn", version)]
struct Cli {
    /// Global seed; every stochastic component derives its own stream from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a perforation mask file.
    Mask(MaskArgs),
    /// Evaluate a network, optionally perforated, and report its cost.
    Eval(EvalArgs),
    /// Greedy search for per-layer perforation rates.
    Search(SearchArgs),
    /// Train or fine-tune a network.
    Train(TrainArgs),
    /// Time a network against its unperforated version.
    Bench(BenchArgs),
    /// Write a synthetic image classification dataset.
    Synth(SynthArgs),
}

/// Network execution flags shared by several commands.
#[derive(Args, Debug, Clone, Copy, Default)]
struct ExecArgs {
    /// Interpolation of skipped positions.
    #[arg(long, default_value = "nearest", value_parser = parse_interp)]
    interp: Interpolation,
    /// Storage of perforated activations.
    #[arg(long, default_value = "compact", value_parser = parse_storage)]
    storage: Storage,
}

#[derive(Args, Debug)]
struct MaskArgs {
    /// Mask generator: uniform, grid, pooling or impact.
    #[arg(long, value_parser = parse_kind)]
    kind: MaskKind,
    /// Number of exact positions.
    #[arg(long, conflicts_with = "rate", required_unless_present = "rate")]
    n: Option<usize>,
    /// Perforation rate as an exact fraction `p/q`.
    #[arg(long, value_parser = parse_rate)]
    rate: Option<Rate>,
    /// Output grid height.
    #[arg(long, required_unless_present = "layer")]
    xp: Option<usize>,
    /// Output grid width.
    #[arg(long, required_unless_present = "layer")]
    yp: Option<usize>,
    /// Take the grid, pooling and impact inputs from this convolution of `--net`.
    #[arg(long, requires = "net")]
    layer: Option<usize>,
    #[arg(long)]
    net: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Samples averaged for impact fields.
    #[arg(long, default_value_t = 512)]
    impact_samples: usize,
    /// Pooling window as `size/stride/pad`.
    #[arg(long, value_parser = parse_pool)]
    pool: Option<perfcnn::masks::PoolGeometry>,
    /// Impact weight field (PCNT tensor with one channel).
    #[arg(long)]
    field: Option<PathBuf>,
    /// Also write the impact field used.
    #[arg(long)]
    field_out: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Perforation configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Evaluate on a seeded subset of this many samples.
    #[arg(long)]
    subset: Option<usize>,
    /// Data for impact fields; the evaluation data when absent.
    #[arg(long)]
    impact_data: Option<PathBuf>,
    /// Sweep this convolution over the rate ladder instead.
    #[arg(long)]
    sweep_layer: Option<usize>,
    /// Mask kinds of the sweep, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_kind, default_value = "uniform,grid,pooling,impact")]
    kinds: Vec<MaskKind>,
    /// Number of ladder levels swept.
    #[arg(long, default_value_t = 20)]
    ladder_steps: usize,
    #[command(flatten)]
    exec: ExecArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Target theoretical (or timed) speedup.
    #[arg(long)]
    target: f64,
    #[arg(long, default_value = "mults", value_parser = parse_cost_model)]
    cost_model: CostModel,
    /// Mask kind for every layer when no start configuration is given.
    #[arg(long, default_value = "grid", value_parser = parse_kind)]
    mask: MaskKind,
    /// Starting configuration; its layers, kinds and seeds are kept.
    #[arg(long)]
    start: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    ladder_steps: usize,
    /// Evaluation subset size.
    #[arg(long, default_value_t = 256)]
    subset: usize,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    /// Also enumerate every level combination (at most three layers).
    #[arg(long)]
    exhaustive: bool,
    #[command(flatten)]
    exec: ExecArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    net: PathBuf,
    /// Initial weights; seeded initialization when absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    epochs: usize,
    /// Perforation applied during training.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0.01)]
    lr: f32,
    #[arg(long, default_value_t = 0.9)]
    momentum: f32,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Held-out data evaluated after training.
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[command(flatten)]
    exec: ExecArgs,
    /// Output weight bundle.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch CSV log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Images to time; random images are used when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    images: usize,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    /// Let the per-layer matrix products use all threads.
    #[arg(long)]
    parallel: bool,
    #[command(flatten)]
    exec: ExecArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 16)]
    x: usize,
    #[arg(long, default_value_t = 16)]
    y: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_rate(s: &str) -> Result<Rate, String> {
    if s.trim() != "0" && !s.contains('/') {
        return Err(format!("`{s}` is not an exact fraction p/q"));
    }
    s.parse().map_err(|e: perfcnn::Error| e.to_string())
}

fn parse_kind(s: &str) -> Result<MaskKind, String> {
    match s.parse::<MaskKind>() {
        Ok(MaskKind::Full | MaskKind::Custom) => Err(format!("`{s}` is not a mask generator")),
        Ok(k) => Ok(k),
        Err(e) => Err(e.to_string()),
    }
}

fn parse_interp(s: &str) -> Result<Interpolation, String> {
    s.parse().map_err(|e: perfcnn::Error| e.to_string())
}

fn parse_storage(s: &str) -> Result<Storage, String> {
    s.parse().map_err(|e: perfcnn::Error| e.to_string())
}

fn parse_cost_model(s: &str) -> Result<CostModel, String> {
    s.parse().map_err(|e: perfcnn::Error| e.to_string())
}

fn parse_pool(s: &str) -> Result<perfcnn::masks::PoolGeometry, String> {
    let parts: Vec<usize> = s
        .split('/')
        .map(|p| p.trim().parse().map_err(|_| format!("`{s}` is not size/stride/pad")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [size, stride, pad] => Ok(perfcnn::masks::PoolGeometry { size, stride, pad }),
        _ => Err(format!("`{s}` is not size/stride/pad")),
    }
}

/// Library errors other than I/O are validation failures.
fn is_validation(err: &anyhow::Error) -> bool {
    fn inner(e: &perfcnn::Error) -> bool {
        match e {
            perfcnn::Error::Io(_) => false,
            perfcnn::Error::Layer { source, .. } => inner(source),
            _ => true,
        }
    }
    err.chain()
        .find_map(|e| e.downcast_ref::<perfcnn::Error>())
        .is_some_and(inner)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let seed = cli.seed;
    let result = match cli.command {
        Command::Mask(a) => commands::mask(a, seed),
        Command::Eval(a) => commands::eval(a, seed),
        Command::Search(a) => commands::search(a, seed),
        Command::Train(a) => commands::train(a, seed),
        Command::Bench(a) => commands::bench(a, seed),
        Command::Synth(a) => commands::synth(a, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_validation(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
