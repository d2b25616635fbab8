//! `mevf`: synthetic data generation, MAML and CDAE pretraining, VQA
//! training and evaluation as reproducible batch runs.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use crate::config::RawConfig;
use crate::error::CliError;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    GenSynthetic,
    PretrainMaml,
    PretrainCdae,
    TrainVqa,
    Eval,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::GenSynthetic => "gen-synthetic",
            Command::PretrainMaml => "pretrain-maml",
            Command::PretrainCdae => "pretrain-cdae",
            Command::TrainVqa => "train-vqa",
            Command::Eval => "eval",
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "mevf",
    version,
    about = "Meta-learned and denoising visual features for medical VQA"
)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Flat `key = value` config file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run directory to create (must not exist). Defaults to runs/<command>-NNN.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// `key=value` override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let mut raw = RawConfig::default();
    if let Some(path) = &cli.config {
        raw.apply_file(path)?;
    }
    for pair in &cli.set {
        raw.set_pair(pair)?;
    }
    if let Some(seed) = cli.seed {
        raw.set("seed", &seed.to_string())?;
    }
    let cfg = raw.resolve()?;
    let dir = commands::create_run_dir(cli.out.as_deref(), cli.command.name())?;
    std::fs::write(dir.join("config.txt"), raw.render())?;
    match cli.command {
        Command::GenSynthetic => commands::gen_synthetic(&cfg, &dir),
        Command::PretrainMaml => commands::pretrain_maml(&cfg, &dir),
        Command::PretrainCdae => commands::pretrain_cdae(&cfg, &dir),
        Command::TrainVqa => commands::train_vqa(&cfg, &dir),
        Command::Eval => commands::eval(&cfg, &dir),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
