use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod inspect;

use config::Overrides;

#[derive(Parser)]
#[command(name = "dpl", version, about = "Search and train per-layer prompt lengths on synthetic few-shot tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run config; missing keys take defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    epochs_search: Option<usize>,
    #[arg(long)]
    epochs_train: Option<usize>,
    /// Distillation weight; absent means plain cross-entropy
    #[arg(long)]
    lambda: Option<f64>,
    /// Candidate lengths, e.g. "0,2,4,6"
    #[arg(long)]
    space: Option<String>,
    /// Also train and report the depth-1, length-16 baseline
    #[arg(long)]
    shallow_baseline: bool,
    /// Train this many seeds and report mean and standard deviation
    #[arg(long)]
    repeat: Option<usize>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            shots: self.shots,
            epochs_search: self.epochs_search,
            epochs_train: self.epochs_train,
            lambda: self.lambda,
            space: self.space.clone(),
            shallow_baseline: self.shallow_baseline,
            repeat: self.repeat,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a task file (task.bin)
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Search a prompt configuration (config.json, traces, metrics.csv)
    Search {
        #[arg(long)]
        task: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the prompts of a configuration and write report.json
    Train {
        #[arg(long)]
        task: PathBuf,
        /// Configuration written by `search`
        #[arg(long)]
        prompt_config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Test accuracy of the unprompted model, or of trained prompts
    Eval {
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Summarize any artifact written by the other commands
    Inspect {
        path: PathBuf,
        /// Run config used for parameter counts of configuration files
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { common } => commands::generate(&common.config, &common.out, &common.overrides()),
        Command::Search { task, common } => commands::search(&common.config, &common.out, &common.overrides(), &task),
        Command::Train {
            task,
            prompt_config,
            common,
        } => commands::train(&common.config, &common.out, &common.overrides(), &task, &prompt_config),
        Command::Eval { task, prompts, common } => {
            commands::eval(&common.config, &common.overrides(), &task, prompts.as_deref())
        }
        Command::Inspect { path, config } => inspect::inspect(&path, config.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for bad input (config, files, contracts), 1 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    use dpl_core::DplError;
    for cause in e.chain() {
        if let Some(d) = cause.downcast_ref::<DplError>() {
            return match d {
                DplError::Contract(_) | DplError::Format(_) | DplError::Io(_) | DplError::Json(_) => 2,
                _ => 1,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() || cause.is::<inspect::UnknownFormat>() {
            return 2;
        }
    }
    1
}
