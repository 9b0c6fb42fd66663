mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qcse::agents::Algo;
use qcse::entropy::ConditionMode;

#[derive(Parser)]
#[command(name = "qcse", version, about = "Offline-to-online RL with a Q-conditioned state entropy bonus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the offline dataset described by the config.
    Generate(Common),
    /// Offline pretraining for every seed.
    Pretrain(Common),
    /// Online fine-tuning from the pretrained agents.
    Finetune(Finetune),
    /// Pretraining followed by fine-tuning.
    Run(Finetune),
    /// Fine-tune once per neighbour count and tabulate the final scores.
    Sweep(Sweep),
    /// Tabular checks of soft policy iteration and the entropy bound.
    Verify(Verify),
}

/// Flags shared by the experiment subcommands.
#[derive(Args, Clone, Default)]
pub struct Common {
    /// TOML experiment config.
    #[arg(long)]
    pub config: PathBuf,
    /// Run only this seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Neighbour count; 0 disables the bonus.
    #[arg(long)]
    pub knn: Option<usize>,
    #[arg(long, value_parser = parse_mode)]
    pub condition_mode: Option<ConditionMode>,
    #[arg(long, value_parser = parse_algo)]
    pub algo: Option<Algo>,
}

#[derive(Args, Clone, Default)]
pub struct Finetune {
    #[command(flatten)]
    pub common: Common,
    /// Condition the bonus on freshly initialised critics.
    #[arg(long)]
    pub scratch_condition_q: bool,
    /// Start from an untrained agent instead of the pretrained checkpoint.
    #[arg(long)]
    pub from_scratch: bool,
}

#[derive(Args, Clone, Default)]
pub struct Sweep {
    #[command(flatten)]
    pub finetune: Finetune,
    /// Comma-separated neighbour counts; defaults to the config list.
    #[arg(long, value_delimiter = ',')]
    pub knn_list: Option<Vec<usize>>,
}

#[derive(Args, Clone, Default)]
pub struct Verify {
    /// Optional TOML config; only its `[verify]` table is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Deliberately break policy improvement to confirm the checks fail.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

fn parse_mode(s: &str) -> Result<ConditionMode, String> {
    s.parse().map_err(|e: qcse::Error| e.to_string())
}

fn parse_algo(s: &str) -> Result<Algo, String> {
    s.parse().map_err(|e: qcse::Error| e.to_string())
}

/// Failure classes, mapped to the process exit code.
#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Assertion(String),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Assertion(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Generate(c) => commands::generate(&c),
        Command::Pretrain(c) => commands::pretrain(&c),
        Command::Finetune(f) => commands::finetune(&f),
        Command::Run(f) => commands::run(&f),
        Command::Sweep(s) => commands::sweep(&s),
        Command::Verify(v) => commands::verify(&v),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(e) => eprintln!("error: {e:#}"),
                Failure::Assertion(m) => eprintln!("verification failed: {m}"),
                Failure::Runtime(e) => eprintln!("error: {e:#}"),
            }
            ExitCode::from(f.code())
        }
    }
}
