use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use bootseg_core::config::ExperimentConfig;
use bootseg_core::pipeline::{Outcome, Pipeline};
use clap::{Args, Parser, Subcommand};

/// Bootstrapped building segmentation experiments.
#[derive(Parser)]
#[command(name = "bootseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Rebuild artifacts even when they are up to date.
    #[arg(long)]
    force: bool,
    /// Worker threads; BOOTSEG_WORKERS takes precedence.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its split.
    Synth(Common),
    /// Train the round-0 model on the full training split.
    Train(Common),
    /// Run the bootstrap rounds.
    Bootstrap(Common),
    /// Evaluate one round's checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        round: usize,
    },
    /// Write the consolidated CSV reports.
    Report(Common),
}

fn workers(flag: Option<usize>) -> Result<Option<usize>> {
    match std::env::var("BOOTSEG_WORKERS") {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .with_context(|| format!("BOOTSEG_WORKERS={v:?} is not a thread count"))?;
            Ok(Some(n))
        }
        Err(_) => Ok(flag),
    }
}

fn pipeline(common: &Common) -> Result<Pipeline> {
    let mut config = ExperimentConfig::load(&common.config)?;
    if let Some(n) = workers(common.workers)? {
        config.workers = Some(n);
    }
    Ok(Pipeline::new(config, common.force)?)
}

fn say(stage: &str, outcome: Outcome) {
    match outcome {
        Outcome::Ran => println!("{stage}: done"),
        Outcome::Skipped => println!("{stage}: up to date, skipped (use --force to rebuild)"),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(c) => say("synth", pipeline(&c)?.synth()?),
        Command::Train(c) => say("train", pipeline(&c)?.train()?),
        Command::Bootstrap(c) => {
            for (k, outcome) in pipeline(&c)?.bootstrap()?.into_iter().enumerate() {
                say(&format!("round {}", k + 1), outcome);
            }
        }
        Command::Eval { common, round } => say(&format!("eval round {round}"), pipeline(&common)?.eval(round)?),
        Command::Report(c) => {
            let p = pipeline(&c)?;
            say("report", p.report()?);
            println!("reports in {}", p.root().join(bootseg_core::pipeline::REPORTS_DIR).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .downcast_ref::<bootseg_core::Error>()
                .map_or("usage", bootseg_core::Error::kind);
            let line = serde_json::json!({ "error": { "kind": kind, "message": format!("{e:#}") } });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
