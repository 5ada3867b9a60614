mod commands;
mod config;
mod inputs;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use idsf::data::Split;
use idsf::model::{Ablation, AblationFlags, DatasetPreset, ModalitySet};
use idsf::Error;

use config::{Overrides, RunConfig};

/// Train and evaluate ID-enhanced multimodal recommenders.
#[derive(Parser, Debug)]
#[command(name = "idsf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split the interactions and write the split manifest.
    Prepare(Common),
    /// Train with early stopping; writes a checkpoint, history and test report.
    Train(Common),
    /// Score a checkpoint (or a freshly initialized model) on one split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = EvalSplit::Test)]
        split: EvalSplit,
    },
    /// Train the full model and its four ablations; writes a comparison table.
    Ablate(Common),
    /// Grid over gamma and beta; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Grid points trained concurrently.
        #[arg(long, default_value_t = 1)]
        parallel_runs: usize,
    },
    /// Similarity matrices over sampled users and embedding exports.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Analyze this checkpoint instead of training first.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for every artifact of this run.
    #[arg(long, default_value = "idsf-run")]
    out: PathBuf,
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    #[arg(long)]
    seed: Option<u64>,
    /// Base directory for relative data paths.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, value_parser = ["t", "v", "tv"])]
    modalities: Option<String>,
    #[arg(long, value_parser = ["on", "off"])]
    enhanced: Option<String>,
    #[arg(long, value_parser = ["none", "no_content", "no_contrast", "content_no_id", "structure_no_id"])]
    ablation: Option<String>,
    #[arg(long)]
    max_epochs: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Baby,
    Sports,
    Clothing,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EvalSplit {
    Valid,
    Test,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            preset: self.preset.map(|p| match p {
                PresetArg::Baby => DatasetPreset::Baby,
                PresetArg::Sports => DatasetPreset::Sports,
                PresetArg::Clothing => DatasetPreset::Clothing,
            }),
            seed: self.seed,
            data_dir: self.data_dir.clone(),
            gamma: self.gamma,
            beta: self.beta,
            // The value parsers above only admit valid spellings.
            modalities: self.modalities.as_deref().and_then(ModalitySet::parse),
            enhanced: self.enhanced.as_deref().map(|s| s == "on"),
            ablation: self
                .ablation
                .as_deref()
                .and_then(Ablation::parse)
                .map(AblationFlags::only),
            max_epochs: self.max_epochs,
        }
    }

    fn load(&self) -> idsf::Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides())
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json(_) => 2,
        Error::Numeric { .. } | Error::Diverged { .. } => 4,
        Error::Parse { .. }
        | Error::EmptyInput(_)
        | Error::Format(_)
        | Error::Mapping { .. }
        | Error::Io(_)
        | Error::Sampling(_)
        | Error::Contract(_)
        | Error::Dimension { .. } => 3,
    }
}

fn dispatch(cli: Cli) -> idsf::Result<String> {
    match cli.command {
        Command::Prepare(c) => commands::prepare(&c.load()?, &c.out),
        Command::Train(c) => commands::train(&c.load()?, &c.out),
        Command::Evaluate {
            common,
            checkpoint,
            split,
        } => {
            let split = match split {
                EvalSplit::Valid => Split::Valid,
                EvalSplit::Test => Split::Test,
            };
            commands::evaluate_cmd(&common.load()?, &common.out, checkpoint.as_deref(), split)
        }
        Command::Ablate(c) => commands::ablate(&c.load()?, &c.out),
        Command::Sweep { common, parallel_runs } => commands::sweep(&common.load()?, &common.out, parallel_runs),
        Command::Analyze { common, checkpoint } => {
            commands::analyze(&common.load()?, &common.out, checkpoint.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
