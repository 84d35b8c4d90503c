mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Failures the user can fix by changing the command line or the config file.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "selg", version, about = "Lip and gesture conditioned target speaker extraction")]
struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON config for the command.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory. Defaults to $SELG_CACHE/<command>.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Single-stream, bit-reproducible execution.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a corpus and write its manifest.
    SynthData(Common),
    /// Train one variant.
    Train(Common),
    /// Add the gesture-to-lip alignment loss to a trained checkpoint.
    Finetune(Common),
    /// Score a checkpoint on a corpus split.
    Evaluate(Common),
    /// Combine evaluation reports into a comparison table and figures.
    Report(Common),
    /// Print one sample's metadata.
    Inspect {
        sample_id: String,
        /// Corpus directory or manifest file.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<selg::Error>() {
        Some(selg::Error::Config(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = commands::set_jobs(jobs) {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::SynthData(c) => commands::synth_data(&c),
        Command::Train(c) => commands::train(&c),
        Command::Finetune(c) => commands::finetune(&c),
        Command::Evaluate(c) => commands::evaluate(&c),
        Command::Report(c) => commands::report(&c),
        Command::Inspect { sample_id, corpus, common } => commands::inspect(&sample_id, corpus, &common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
