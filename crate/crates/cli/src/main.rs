// SPDX-License-Identifier: MIT OR Apache-2.0

//! `dneuron`: trace a model over a multi-domain corpus, pick out
//! domain-specific FFN neurons, and probe them with deactivation and the
//! logit lens.
//!
//! Exit codes: 0 success, 2 bad arguments or unusable inputs, 3 malformed
//! input data. Log level comes from `DNEURON_LOG` (default `warn`).

// Negated range checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod error;
mod files;
mod report;

use clap::{Parser, Subcommand};

use commands::{DeviateArgs, IdentifyArgs, LensArgs, PipelineArgs, ReportArgs, SynthArgs, TraceArgs};
use error::CliResult;

#[derive(Debug, Parser)]
#[command(name = "dneuron", version, about = "Find and probe domain-specific neurons in transformer FFN layers")]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a reference model with planted domain neurons and a matching corpus.
    Synth(SynthArgs),
    /// Record FFN activations of a model over a corpus, one trace file per domain.
    Trace(TraceArgs),
    /// Select the lowest-DAPE neurons and assign them to domains.
    Identify(IdentifyArgs),
    /// Decode every layer's hidden state at one position through the output head.
    Lens(LensArgs),
    /// Measure final-state deviation when each domain's neurons are deactivated.
    Deviate(DeviateArgs),
    /// Consolidate selection, deviation and entropy artifacts into one report.
    Report(ReportArgs),
    /// Run trace, identify, deviate, entropy curves and report in one go.
    Pipeline(PipelineArgs),
}

fn run(cli: &Cli) -> CliResult<()> {
    log::info!("seed {}", cli.seed);
    match &cli.command {
        Command::Synth(a) => commands::synth(a, cli.seed),
        Command::Trace(a) => commands::trace(a),
        Command::Identify(a) => commands::identify(a),
        Command::Lens(a) => commands::lens(a),
        Command::Deviate(a) => commands::deviate(a, cli.seed),
        Command::Report(a) => commands::report(a),
        Command::Pipeline(a) => commands::pipeline(a, cli.seed),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DNEURON_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
