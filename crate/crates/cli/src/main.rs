//! `subel` — batch front-end for the subelliptic laboratory.
//!
//! Loads a field-system configuration, runs the requested checks and writes
//! deterministic JSON artifacts (CSV on request). See README for the config
//! format and the exit-code contract.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::Format;
use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "subel",
    about = "Checks and sweeps for Hörmander systems and subelliptic operators"
)]
struct Cli {
    /// Path to the run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for report artifacts (created if absent).
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Overrides the seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel sweeps (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Artifact format; JSON is always written, csv adds plot-friendly files.
    #[arg(long, global = true, value_enum, default_value = "json")]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the four uniform-Hörmander criteria plus the rank search.
    CheckHormander,
    /// Measure the remainder order of the corrected two-flow product.
    Bch,
    /// Group-law and inverse checks for the flows of the generating fields.
    Flow,
    /// Hölder-norm comparison constants under grid refinement.
    Holder,
    /// Subelliptic constant sweeps, order scan and rank cross-check.
    Subell,
    /// All of the above combined into a single report artifact.
    Report,
}

fn main() {
    let cli = Cli::parse();
    std::process::exit(run(cli));
}

fn run(cli: Cli) -> i32 {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("config error: --jobs must be at least 1");
            return commands::EXIT_CONFIG;
        }
        // Ignore the error when a global pool already exists (tests).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }

    let Some(config_path) = cli.config.as_deref() else {
        eprintln!("config error: --config PATH is required");
        return commands::EXIT_CONFIG;
    };
    let mut cfg = match RunConfig::load(config_path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return commands::EXIT_CONFIG;
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }

    if let Err(e) = std::fs::create_dir_all(&cli.out) {
        eprintln!("config error: cannot create {}: {e}", cli.out.display());
        return commands::EXIT_CONFIG;
    }

    let result = match cli.command {
        Command::CheckHormander => commands::cmd_check_hormander(&cfg, &cli.out, cli.format),
        Command::Bch => commands::cmd_bch(&cfg, &cli.out, cli.format),
        Command::Flow => commands::cmd_flow(&cfg, &cli.out, cli.format),
        Command::Holder => commands::cmd_holder(&cfg, &cli.out, cli.format),
        Command::Subell => commands::cmd_subell(&cfg, &cli.out, cli.format),
        Command::Report => commands::cmd_report(&cfg, &cli.out, cli.format),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("{}", f.msg);
            f.code
        }
    }
}
