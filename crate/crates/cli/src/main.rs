use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tabdeco_cli::ablate::cmd_ablate;
use tabdeco_cli::run::cmd_train;
use tabdeco_cli::tools::{cmd_evaluate, cmd_gradcheck, cmd_synth};
use tabdeco_cli::{Result, RunConfig};
use tabdeco_core::data::synthetic::LabelRule;

#[derive(Parser)]
#[command(
    name = "tabdeco",
    version,
    about = "Train and evaluate dual-attention tabular models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per configured seed and report the test metric.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Replace existing outputs in the output directory.
        #[arg(long)]
        overwrite: bool,
    },
    /// Score a CSV with a checkpoint written by `train`.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        /// Corrupt the backward rule of this op (negative control).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Run every loss combination of the ablation grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Write the bundled synthetic dataset as CSV.
    Synth {
        #[arg(long, default_value_t = 2000)]
        rows: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Rule::Logistic)]
        rule: Rule,
        /// Slope of the logistic label rule.
        #[arg(long, default_value_t = 4.0)]
        scale: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Rule {
    Logistic,
    Threshold,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, overwrite } => {
            cmd_train(&RunConfig::load(&config)?, overwrite)?;
        }
        Command::Evaluate { checkpoint, data } => {
            let out = cmd_evaluate(&checkpoint, &data)?;
            println!("{}", serde_json::to_string_pretty(&out).expect("output serializes"));
        }
        Command::Gradcheck { inject_fault } => {
            cmd_gradcheck(inject_fault.as_deref())?;
        }
        Command::Ablate { config, overwrite } => {
            cmd_ablate(&RunConfig::load(&config)?, overwrite)?;
        }
        Command::Synth {
            rows,
            seed,
            rule,
            scale,
            out,
            overwrite,
        } => {
            let rule = match rule {
                Rule::Logistic => LabelRule::Logistic { scale },
                Rule::Threshold => LabelRule::Threshold,
            };
            cmd_synth(rows, seed, rule, &out, overwrite)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
