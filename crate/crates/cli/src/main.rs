use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sdaa_cli::commands::{self, EvalArgs, ExportArgs};
use sdaa_cli::config::{RunConfig, SEED_ENV};
use sdaa_cli::CliError;
use sdaa_core::data::DataConfig;
use sdaa_core::sdpm::KShotStrategy;

#[derive(Parser)]
#[command(name = "sdaa", version, about = "Few-shot segmentation experiments on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a held-out fold.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        fold: usize,
        #[arg(long)]
        episodes: usize,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, default_value_t = KShotStrategy::Separate)]
        strategy: KShotStrategy,
        #[arg(long)]
        multi_scale: bool,
        /// Episode seed; falls back to SDAA_SEED, then 0.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        /// Where to write the metrics line.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train and evaluate all four module combinations.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write attention, similarity and prediction maps for one test episode.
    Export {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        episode_seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, default_value_t = KShotStrategy::Separate)]
        strategy: KShotStrategy,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
    },
    /// Dump generated samples as PPM images and PGM masks.
    Corpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn data_config(image_size: usize) -> DataConfig {
    DataConfig {
        image_size,
        ..DataConfig::default()
    }
}

fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Config(format!("{SEED_ENV}: invalid seed `{s}`"))),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::Train { config } => {
            commands::cmd_train(&RunConfig::load(&config)?, &mut out)?;
        }
        Command::Eval {
            ckpt,
            fold,
            episodes,
            k,
            strategy,
            multi_scale,
            seed,
            image_size,
            log,
        } => {
            let seed = match seed {
                Some(s) => s,
                None => env_seed()?.unwrap_or(0),
            };
            let args = EvalArgs {
                checkpoint: ckpt,
                fold,
                episodes,
                k,
                strategy,
                multi_scale,
                seed,
                log,
            };
            commands::cmd_eval(&args, &data_config(image_size), &mut out)?;
        }
        Command::Ablate { config } => {
            commands::cmd_ablate(&RunConfig::load(&config)?, &mut out)?;
        }
        Command::Export {
            ckpt,
            episode_seed,
            out: out_dir,
            fold,
            k,
            strategy,
            image_size,
        } => {
            let args = ExportArgs {
                checkpoint: ckpt,
                episode_seed,
                out_dir,
                fold,
                k,
                strategy,
            };
            commands::cmd_export(&args, &data_config(image_size), &mut out)?;
        }
        Command::Corpus { out: dir, per_class, seed } => {
            commands::cmd_corpus(&DataConfig::default(), &dir, per_class, seed, &mut out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
