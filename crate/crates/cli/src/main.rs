mod commands;
mod prov;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kcd_core::{KcdError, MetricKind, Strategy};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "kcd", version, about = "Channel matching and knowledge-consistent distillation")]
struct Cli {
    /// Worker threads for data-parallel loops [default: all cores]
    #[arg(long, global = true, env = "KCD_THREADS")]
    threads: Option<usize>,

    /// Seed for the stochastic stages (random matching, residual fit, templates)
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output file or directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Global-average-pool activation tensors (or a manifest) into [b, c]
    Pool(PoolArgs),
    /// Teacher/student consistency matrix
    Consistency(ConsistencyArgs),
    /// Derive a channel transformation from a matrix or from features
    Match(MatchArgs),
    /// Apply a saved transformation to an activation tensor
    Apply(ApplyArgs),
    /// Fit a learned linear (fc) or residual (res) transformation
    LearnTransform(LearnArgs),
    /// Top-k channel overlap of class-averaged activations
    Overlap(OverlapArgs),
    /// Mean L2 and KL distance between paired features
    Distance(DistanceArgs),
    /// The built-in distillation lab
    #[command(subcommand)]
    Distill(DistillCmd),
    /// Generate the synthetic classification dataset
    Synth(SynthArgs),
}

/// Where pooled features come from when a path is a TOML manifest.
#[derive(Args, Debug, Clone, Serialize)]
pub struct Selection {
    /// Manifest split tag
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Manifest layer tag
    #[arg(long)]
    pub layer: Option<String>,
}

#[derive(Args, Debug, Serialize)]
pub struct PairArgs {
    /// Teacher activations (.npy) or manifest (.toml)
    #[arg(long)]
    pub teacher: PathBuf,
    /// Student activations (.npy) or manifest (.toml)
    #[arg(long)]
    pub student: PathBuf,
    #[command(flatten)]
    pub sel: Selection,
}

#[derive(Args, Debug, Serialize)]
pub struct PoolArgs {
    /// Activation tensors, concatenated along the batch axis
    #[arg(long, num_args = 1.., conflicts_with = "manifest", required_unless_present = "manifest")]
    pub input: Vec<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[command(flatten)]
    pub sel: Selection,
}

#[derive(Args, Debug, Serialize)]
pub struct ConsistencyArgs {
    #[command(flatten)]
    pub pair: PairArgs,
    #[arg(long, default_value = "correlation")]
    #[serde(serialize_with = "prov::display")]
    pub metric: MetricKind,
    #[arg(long, default_value_t = kcd_core::consistency::DEFAULT_EPSILON)]
    pub epsilon: f64,
}

#[derive(Args, Debug, Serialize)]
pub struct MatchArgs {
    /// Precomputed consistency matrix (.npy with .json sidecar)
    #[arg(long, conflicts_with_all = ["teacher", "student"])]
    pub matrix: Option<PathBuf>,
    #[arg(long, requires = "student")]
    pub teacher: Option<PathBuf>,
    #[arg(long, requires = "teacher")]
    pub student: Option<PathBuf>,
    #[command(flatten)]
    pub sel: Selection,
    #[arg(long, default_value = "correlation")]
    #[serde(serialize_with = "prov::display")]
    pub metric: MetricKind,
    #[arg(long, default_value_t = kcd_core::consistency::DEFAULT_EPSILON)]
    pub epsilon: f64,
    /// identity | random | greedy | bipartite
    #[arg(long, default_value = "bipartite")]
    #[serde(serialize_with = "prov::display")]
    pub strategy: Strategy,
}

#[derive(Args, Debug, Serialize)]
pub struct ApplyArgs {
    #[arg(long)]
    pub transform: PathBuf,
    /// Activation tensor (.npy) with the transform's channel count
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct LearnArgs {
    /// fc | res
    #[arg(long, value_parser = ["fc", "res"])]
    pub kind: String,
    #[command(flatten)]
    pub pair: PairArgs,
    /// Ridge penalty for fc
    #[arg(long, default_value_t = 1e-6)]
    pub lambda: f64,
    /// Learning rate for res
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    /// Epochs for res
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    /// Hidden width for res [default: channel count]
    #[arg(long)]
    pub hidden: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct OverlapArgs {
    #[command(flatten)]
    pub pair: PairArgs,
    /// Integer class labels (.npy); taken from the manifest when omitted
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "10,20,50")]
    pub k: Vec<usize>,
    /// Transform applied to the teacher before comparing
    #[arg(long)]
    pub transform: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct DistanceArgs {
    #[command(flatten)]
    pub pair: PairArgs,
    /// Transform applied to the teacher before comparing
    #[arg(long)]
    pub transform: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistillCmd {
    /// Run the full procedure from a run configuration
    Run(DistillRunArgs),
    /// Write the reference toy configuration for --seed
    Template,
}

#[derive(Args, Debug, Serialize)]
pub struct DistillRunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Distill from a different initialization than the baseline (ablation)
    #[arg(long)]
    pub reinit_seed: Option<u64>,
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    /// Dataset specification (TOML)
    #[arg(long)]
    pub spec: PathBuf,
}

fn main() -> ExitCode {
    std::panic::set_hook(Box::new(|info| {
        let msg = info.to_string().replace('\n', " ");
        eprintln!("error: InternalError: {msg}");
        std::process::exit(4);
    }));
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("bad arguments").trim_start_matches("error: ");
            eprintln!("error: ConfigError: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.category(), e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> kcd_core::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(KcdError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| KcdError::Config(format!("thread pool: {e}")))?;
    }
    let ctx = commands::Ctx { seed: cli.seed, out: cli.out };
    commands::dispatch(&ctx, &cli.cmd)
}
