use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, ValueEnum};

use dcls::commands::{self, Command};
use dcls::config::PipelineConfig;
use dcls::Error;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Subcommand {
    SynthData,
    TrainProxy,
    TrainGenerator,
    Augment,
    TrainClassifier,
    Evaluate,
    SweepGroups,
    Ablation,
    PartialData,
    Project,
}

impl Subcommand {
    fn command(self) -> Command {
        match self {
            Subcommand::SynthData => Command::SynthData,
            Subcommand::TrainProxy => Command::TrainProxy,
            Subcommand::TrainGenerator => Command::TrainGenerator,
            Subcommand::Augment => Command::Augment,
            Subcommand::TrainClassifier => Command::TrainClassifier,
            Subcommand::Evaluate => Command::Evaluate,
            Subcommand::SweepGroups => Command::SweepGroups,
            Subcommand::Ablation => Command::Ablation,
            Subcommand::PartialData => Command::PartialData,
            Subcommand::Project => Command::Project,
        }
    }
}

/// Diffusion-based augmentation pipeline for low-resource text classification.
///
/// Settings come from a flat `section.key=value` file and may be overridden
/// with trailing `--section.key=value` arguments. DCLS_SEED overrides
/// `run.seed`.
#[derive(Debug, Parser)]
#[command(name = "dcls", version)]
struct Cli {
    command: Subcommand,
    /// Config file with one `section.key=value` per line.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides such as `--schedule.T=32` or `train.tau=0.5`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, Error> {
    let mut out = Vec::new();
    let mut iter = args.iter();
    while let Some(arg) = iter.next() {
        let body = arg.trim_start_matches('-');
        match body.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = iter
                    .next()
                    .ok_or_else(|| Error::Config(format!("override '{arg}' has no value")))?;
                out.push((body.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

fn run(cli: &Cli) -> Result<PathBuf, Error> {
    let mut overrides = parse_overrides(&cli.overrides)?;
    // `--config` after an override lands in the trailing list
    let mut config = cli.config.clone();
    if let Some(i) = overrides.iter().rposition(|(k, _)| k == "config") {
        config = Some(PathBuf::from(overrides.remove(i).1));
    }
    let env_seed = std::env::var("DCLS_SEED").ok();
    let cfg = PipelineConfig::load(config.as_deref(), &overrides, env_seed.as_deref())?;
    let cmd = cli.command.command();
    commands::execute(cmd, &cfg)?;
    Ok(commands::metrics_path(&cfg, cmd))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(&cli) {
        Ok(path) => {
            println!("{}: wrote {}", cli.command.command().name(), path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
