mod commands;
mod diagnose;
mod http;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use spatial_contrast::evaluation::PopeKind;
use spatial_contrast::objective::LossKind;

#[derive(Parser)]
#[command(name = "spacon", version, about = "Spatial contrastive instruction tuning for point-cloud language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic colored-object scenes and QA annotations.
    Synth(SynthArgs),
    /// Normalize scenes and build per-stage instruction files.
    PrepareData(PrepareArgs),
    /// Build preference triplets (hard, easy or existence negatives).
    GenNegatives(NegativesArgs),
    /// Train one stage.
    Train(TrainArgs),
    /// Generate answers and score them.
    Evaluate(EvaluateArgs),
    /// Export log-odds-ratio and reward-margin curves from a metrics log.
    Diagnose(DiagnoseArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// Output directory; receives scenes/ and annotations.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub scenes: usize,
    #[arg(long, default_value_t = 2)]
    pub min_objects: usize,
    #[arg(long, default_value_t = 3)]
    pub max_objects: usize,
    #[arg(long, default_value_t = 256)]
    pub points_per_object: usize,
    /// QA annotations per scene.
    #[arg(long, default_value_t = 2)]
    pub qa_per_scene: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct PrepareArgs {
    /// Directory of scene files (*.jsonl or *.xyz).
    #[arg(long)]
    pub scenes: Option<PathBuf>,
    /// Annotation JSON-lines file; may be repeated.
    #[arg(long)]
    pub annotations: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Points kept per object by farthest point sampling.
    #[arg(long, default_value_t = 8192)]
    pub points_per_object: usize,
    /// Shorthand for --points-per-object 1024.
    #[arg(long, conflicts_with = "points_per_object")]
    pub low_res: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct NegativesArgs {
    /// Stage-3 pair file to build negatives for.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Scene directory (prepared).
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Use the deterministic offline client, optionally with a JSON fixture.
    #[arg(long, num_args = 0..=1, value_name = "FIXTURE")]
    pub mock: Option<Option<PathBuf>>,
    /// Pair each sample with another sample's response instead.
    #[arg(long, conflicts_with = "mock")]
    pub easy: bool,
    /// Also build N existence questions per scene.
    #[arg(long, value_name = "N")]
    pub existence: Option<usize>,
    /// Directory holding <scene_id>.png renders sent along with prompts.
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum LossArg {
    Or,
    Pr,
    Sft,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Or => LossKind::Or,
            LossArg::Pr => LossKind::Pr,
            LossArg::Sft => LossKind::Sft,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ModelSize {
    Tiny,
    Base,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Training stage (1, 2 or 3); a `stage` key in --config wins.
    #[arg(long, default_value_t = 1)]
    pub stage: u8,
    /// Pair or triplet JSON-lines file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub scenes: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Vocabulary file for a fresh model (default: vocab.txt next to --data).
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Checkpoint of the previous stage.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Allow starting a stage without a completed previous stage.
    #[arg(long)]
    pub allow_skip: bool,
    /// Continue the checkpoint in --out.
    #[arg(long)]
    pub resume: bool,
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    #[arg(long)]
    pub lambda_max: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// TOML config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Architecture of a fresh model when --config has no [model] table.
    #[arg(long, value_enum, default_value = "base")]
    pub model_size: ModelSize,
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub model: PathBuf,
    /// Pair or triplet JSON-lines file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 24)]
    pub max_new: usize,
    /// Run the object-hallucination protocol with this sampler.
    #[arg(long)]
    pub pope: Option<PopeKind>,
    /// Yes and no questions per scene.
    #[arg(long, default_value_t = 3)]
    pub pope_k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct DiagnoseArgs {
    /// metrics.csv written by `train`.
    #[arg(long)]
    pub metrics: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Trailing moving-average window.
    #[arg(long, default_value_t = 1)]
    pub window: usize,
}

/// A bad flag value or missing input detected before any work.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    use spatial_contrast::Error as E;
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<E>() {
        Some(E::Config(_)) => 2,
        Some(E::Numeric(_) | E::DegenerateProbability(_)) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::PrepareData(a) => commands::prepare_data(a),
        Command::GenNegatives(a) => commands::gen_negatives(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Diagnose(a) => diagnose::run(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
