//! `arpersona`: world generation, pretraining, two-stage personalization,
//! sampling, evaluation and ablation grids over one run directory.

mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use arpersona::pipeline::AblationGrid;

#[derive(Debug, Parser)]
#[command(name = "arpersona", version, about)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Args)]
pub struct GlobalArgs {
    /// Run config (JSON). Defaults to <out>/config.json, then the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; every stage seed is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory shared by all commands.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    /// Require an explicit seed and keep timings out of every artifact.
    #[arg(long, global = true)]
    pub strict_repro: bool,
    /// Preset used when no config file is found.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Bench)]
    pub preset: Preset,
    /// Generation worker threads (0: all cores). Does not affect results.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Bench,
    Smoke,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the sprite world, its vocabulary and the pretraining corpus.
    Worldgen,
    /// Train the base model on the corpus.
    Pretrain,
    /// Personalize the base model to one held-out subject.
    Personalize(PersonalizeArgs),
    /// Sample images from a checkpoint.
    Generate(GenerateArgs),
    /// Score base, stage-1 and stage-2 models on the held-out subjects.
    Eval(EvalArgs),
    /// Run an ablation grid from the base model.
    Ablate(AblateArgs),
    /// Print a trainable-parameter count.
    Params(ParamsArgs),
}

#[derive(Debug, Args)]
pub struct PersonalizeArgs {
    /// Held-out subject id (default: the first evaluated subject).
    #[arg(long)]
    pub subject: Option<u32>,
    /// Stop after stage 1
    #[arg(long, conflicts_with = "stage2_only")]
    pub stage1_only: bool,
    /// Run stage 2 from the stage-1 checkpoint given by `--from`.
    #[arg(long)]
    pub stage2_only: bool,
    /// Stage-1 checkpoint to continue from
    #[arg(long)]
    pub from: Option<PathBuf>,
    /// Stage 2 trains LoRA adapters instead of the full Q/K/V projections.
    #[arg(long)]
    pub lora: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub prompt: String,
    /// Defaults to <out>/base.ckpt.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Defaults to vocab.json beside the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    /// Pixel size of one grid cell in the PPM.
    #[arg(long, default_value_t = 16)]
    pub cell: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Score one personalized checkpoint instead of the full comparison.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub grid: GridArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GridArg {
    Lora,
    NoClassName,
    EmbeddingOnly,
}

impl From<GridArg> for AblationGrid {
    fn from(g: GridArg) -> Self {
        match g {
            GridArg::Lora => AblationGrid::Lora,
            GridArg::NoClassName => AblationGrid::NoClassName,
            GridArg::EmbeddingOnly => AblationGrid::EmbeddingOnly,
        }
    }
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[arg(long, default_value_t = 4096)]
    pub d: usize,
    #[arg(long, default_value_t = 32)]
    pub layers: usize,
    #[arg(long, value_enum, default_value_t = ParamsMode::Lora)]
    pub mode: ParamsMode,
    #[arg(long, default_value_t = 16)]
    pub rank: usize,
    #[arg(long, default_value_t = 1)]
    pub every_n: usize,
    /// Adapted projections per selected layer.
    #[arg(long, default_value_t = 3)]
    pub targets: usize,
    /// Embedding rows for `embedding-only`.
    #[arg(long, default_value_t = 1)]
    pub rows: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ParamsMode {
    Lora,
    FullAttn,
    EmbeddingOnly,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
