//! propetl: train and audit shared-prototype parameter-efficient modules.
//!
//! Exit codes are a stable contract: 0 success, 2 configuration error,
//! 3 training failure, 4 corrupt artifact.

mod commands;
mod config;

use anyhow::{anyhow, Result};
use clap::{Args, Parser, Subcommand};
use commands::{BlsMode, SweepAxis};
use config::{defaults, parse_config_file, KeyMap, RunSpec};
use propetl::masking::Sparsity;
use propetl::petl::Variant;
use std::path::PathBuf;
use std::process::ExitCode;

pub const CONFIG_EXIT: i32 = 2;
pub const TRAIN_EXIT: i32 = 3;
pub const CORRUPT_EXIT: i32 = 4;

/// An error carrying its process exit code.
#[derive(Debug)]
pub struct Coded {
    pub code: i32,
    pub inner: anyhow::Error,
}

impl std::fmt::Display for Coded {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.inner)
    }
}

impl std::error::Error for Coded {}

pub fn coded(code: i32, inner: anyhow::Error) -> anyhow::Error {
    anyhow::Error::new(Coded { code, inner })
}

#[derive(Parser)]
#[command(name = "propetl", version, about = "shared-prototype PETL trainer and auditor")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one task (or the whole suite with --multi) and write
    /// checkpoint, metrics, and manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Grid of runs over a sparsity or bottleneck-size axis.
    Sweep(SweepArgs),
    /// Bit-level storage report for a module configuration.
    Bls(BlsArgs),
    /// Validate and describe a checkpoint file.
    Inspect(InspectArgs),
    /// Write a deterministic synthetic task suite.
    GenTasks(GenTasksArgs),
}

/// Shared run configuration: every config-file key has a flag of the same
/// name. Flags override the file, which overrides defaults.
#[derive(Args)]
struct SpecArgs {
    /// Flat key = value config file with [section] headers.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    heads: Option<String>,
    #[arg(long)]
    ffn: Option<String>,
    #[arg(long)]
    vocab: Option<String>,
    #[arg(long)]
    max_seq: Option<String>,
    #[arg(long)]
    warmup_steps: Option<String>,
    #[arg(long)]
    warmup_lr: Option<String>,
    /// adapter | lora | prefix
    #[arg(long)]
    variant: Option<String>,
    /// Bottleneck width (adapter/lora) or prefix length.
    #[arg(long)]
    size: Option<String>,
    /// propetl | only_share | only_mask | random_mask
    #[arg(long)]
    mode: Option<String>,
    /// Keep fraction, e.g. 1/2 or 0.3. Meaningless for only_share.
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    nonlin: Option<String>,
    #[arg(long)]
    combine: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    reparam: Option<String>,
    #[arg(long)]
    lambda_p: Option<String>,
    #[arg(long)]
    lambda_m: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    eval_every: Option<String>,
    #[arg(long)]
    eval_batch: Option<String>,
    /// Train every task of the suite against one shared module.
    #[arg(long)]
    multi: bool,
    /// Task file written by gen-tasks; omit for the built-in suite.
    #[arg(long)]
    tasks: Option<String>,
    #[arg(long)]
    task_index: Option<String>,
    #[arg(long)]
    seed: Option<String>,
}

impl SpecArgs {
    /// Returns the resolved spec; the bool tracks whether k was set
    /// explicitly anywhere (file or flag).
    fn resolve(&self) -> Result<RunSpec> {
        let mut map: KeyMap = defaults();
        let mut k_explicit = false;
        if let Some(path) = &self.config {
            let before = map.get("module.k").cloned();
            parse_config_file(path, &mut map).map_err(|e| coded(CONFIG_EXIT, e))?;
            k_explicit = map.get("module.k").cloned() != before;
        }
        let overlays: [(&str, &Option<String>); 26] = [
            ("backbone.layers", &self.layers),
            ("backbone.hidden", &self.hidden),
            ("backbone.heads", &self.heads),
            ("backbone.ffn", &self.ffn),
            ("backbone.vocab", &self.vocab),
            ("backbone.max_seq", &self.max_seq),
            ("backbone.warmup_steps", &self.warmup_steps),
            ("backbone.warmup_lr", &self.warmup_lr),
            ("module.variant", &self.variant),
            ("module.size", &self.size),
            ("module.mode", &self.mode),
            ("module.k", &self.k),
            ("module.nonlin", &self.nonlin),
            ("module.combine", &self.combine),
            ("module.alpha", &self.alpha),
            ("module.reparam", &self.reparam),
            ("train.lambda_p", &self.lambda_p),
            ("train.lambda_m", &self.lambda_m),
            ("train.steps", &self.steps),
            ("train.batch_size", &self.batch_size),
            ("train.optimizer", &self.optimizer),
            ("train.schedule", &self.schedule),
            ("train.eval_every", &self.eval_every),
            ("train.eval_batch", &self.eval_batch),
            ("data.tasks_file", &self.tasks),
            ("data.task_index", &self.task_index),
        ];
        for (key, value) in overlays {
            if let Some(v) = value {
                if key == "module.k" {
                    k_explicit = true;
                }
                map.insert(key.to_string(), v.clone());
            }
        }
        if let Some(seed) = &self.seed {
            map.insert("run.seed".to_string(), seed.clone());
        }
        if self.multi {
            map.insert("train.multi".to_string(), "true".to_string());
        }
        RunSpec::from_map(map, k_explicit).map_err(|e| coded(CONFIG_EXIT, e))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// Output directory for checkpoint.pptl, metrics.csv, manifest.txt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    spec: SpecArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// train | valid | test
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// sparsity | size
    #[arg(long)]
    axis: String,
    /// Comma-separated grid: keep fractions (sparsity) or widths (size).
    #[arg(long)]
    grid: String,
    /// Comma-separated seeds, one run per grid point per seed.
    #[arg(long, default_value = "1,2,3,4,5")]
    seeds: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BlsArgs {
    #[arg(long, default_value = "adapter")]
    variant: String,
    #[arg(long)]
    d: usize,
    /// Bottleneck width or prefix length.
    #[arg(long)]
    size: usize,
    #[arg(long)]
    layers: usize,
    #[arg(long, default_value_t = 0)]
    tasks: usize,
    /// propetl | vanilla | only_mask
    #[arg(long, default_value = "propetl")]
    mode: String,
    /// Keep fraction; used by only_mask.
    #[arg(long, default_value = "1/2")]
    k: String,
    /// Store prefix rows directly instead of the reparameterized form.
    #[arg(long)]
    literal_prefix: bool,
    /// Parameter count of a full 32-bit model to compare against.
    #[arg(long)]
    full_params: Option<u64>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct GenTasksArgs {
    /// Output task file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// standard | imbalanced
    #[arg(long, default_value = "standard")]
    suite: String,
    /// Train sizes for the imbalanced pair.
    #[arg(long, default_value = "10000,100")]
    sizes: String,
}

fn parse_sizes(s: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(coded(CONFIG_EXIT, anyhow!("--sizes wants two comma-separated counts")));
    }
    let a = parts[0].trim().parse::<usize>();
    let b = parts[1].trim().parse::<usize>();
    match (a, b) {
        (Ok(a), Ok(b)) => Ok((a, b)),
        _ => Err(coded(CONFIG_EXIT, anyhow!("--sizes {s:?}: counts must be integers"))),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train(args) => {
            let spec = args.spec.resolve()?;
            commands::cmd_train(&spec, &args.out)
        }
        Cmd::Eval(args) => {
            let spec = args.spec.resolve()?;
            commands::cmd_eval(&spec, &args.checkpoint, &args.split)
        }
        Cmd::Sweep(args) => {
            let spec = args.spec.resolve()?;
            let axis: SweepAxis =
                args.axis.parse().map_err(|e: anyhow::Error| coded(CONFIG_EXIT, e))?;
            commands::cmd_sweep(&spec, axis, &args.grid, &args.seeds, &args.out)
        }
        Cmd::Bls(args) => {
            let variant: Variant =
                args.variant.parse().map_err(|e| coded(CONFIG_EXIT, anyhow!("{e}")))?;
            let mode: BlsMode =
                args.mode.parse().map_err(|e: anyhow::Error| coded(CONFIG_EXIT, e))?;
            let k: Sparsity = args.k.parse().map_err(|e| coded(CONFIG_EXIT, anyhow!("{e}")))?;
            commands::cmd_bls(
                variant,
                args.d,
                args.size,
                args.layers,
                args.tasks,
                mode,
                k,
                args.literal_prefix,
                args.full_params,
            )
        }
        Cmd::Inspect(args) => commands::cmd_inspect(&args.checkpoint),
        Cmd::GenTasks(args) => {
            let sizes = parse_sizes(&args.sizes)?;
            commands::cmd_gen_tasks(&args.out, args.seed, &args.suite, sizes)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err
                .chain()
                .find_map(|e| e.downcast_ref::<Coded>().map(|c| c.code))
                .unwrap_or(CONFIG_EXIT);
            ExitCode::from(code as u8)
        }
    }
}
