use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use tracing_subscriber::EnvFilter;

use debateqd::cli::{self, config, exit, CliError, EvaluateOptions, ExperimentConfig};

/// Quality-diversity evolution of LLM debate strategies.
#[derive(Parser)]
#[command(name = "debateqd", version)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run or resume a generational evolution experiment.
    Evolve {
        /// Experiment config (TOML).
        config: PathBuf,
    },
    /// Generate and rate the non-evolutionary baseline pool.
    Staticgen { config: PathBuf },
    /// Build elite panels for two runs and bootstrap their gap difference.
    Evaluate {
        dir_a: PathBuf,
        dir_b: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Export CSV tables and a summary for one run.
    Report { dir: PathBuf },
    /// Embedding diversity of every strategy each run created.
    Diversity {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
    /// Check a config and print its hash without running anything.
    ValidateConfig { config: PathBuf },
}

fn print_json<T: Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("output serializes"));
}

fn load(path: &std::path::Path) -> Result<ExperimentConfig, CliError> {
    Ok(ExperimentConfig::load(path, &config::process_env)?)
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Evolve { config } => {
            let s = cli::cmd_evolve(load(&config)?)?;
            if let Some(last) = s.final_state() {
                println!(
                    "generations recorded: {} (computed now: {}), final population: {}",
                    s.states.len(),
                    s.computed.len(),
                    last.population.len()
                );
            }
        }
        Command::Staticgen { config } => {
            let out = cli::cmd_staticgen(load(&config)?)?;
            println!("staticgen pool: {} strategies rated", out.pool_size);
        }
        Command::Evaluate {
            dir_a,
            dir_b,
            iterations,
            seed,
        } => {
            let c = cli::cmd_evaluate(&dir_a, &dir_b, EvaluateOptions { iterations, seed })?;
            print_json(&c);
        }
        Command::Report { dir } => {
            let s = cli::cmd_report(&dir)?;
            if !s.missing.is_empty() {
                eprintln!("warning: partial report, absent: {}", s.missing.join(", "));
            }
            print_json(&s);
        }
        Command::Diversity { dirs } => {
            let recs = cli::cmd_diversity(&dirs)?;
            for r in &recs {
                println!("{}\t{}\t{:.6}", r.label, r.texts, r.diversity);
            }
            if let [a, b, ..] = recs.as_slice() {
                if b.diversity > 0.0 {
                    println!("ratio {} / {}: {:.4}", a.label, b.label, a.diversity / b.diversity);
                }
            }
        }
        Command::ValidateConfig { config } => print_json(&cli::cmd_validate_config(&config)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let args = Args::parse();
    match run(args.command) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
