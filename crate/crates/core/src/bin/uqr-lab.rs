use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use uqr_lab::cli::{self, RunConfig, EXIT_AUDIT_FAIL, EXIT_CONFIG, EXIT_PASS, SEED_ENV};
use uqr_lab::LabError;

#[derive(Parser)]
#[command(name = "uqr-lab", version, about = "Entropy experiments for uniformly quasiregular maps")]
struct Args {
    /// Worker threads (default: all available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run { config: PathBuf },
    /// Check a config file and print its resolved form.
    Validate { config: PathBuf },
    /// Print the JSON Schema of config files.
    Schema,
}

fn load(path: &PathBuf) -> Result<RunConfig, LabError> {
    let mut config = RunConfig::load(path)?;
    if let Ok(seed) = std::env::var(SEED_ENV) {
        config.seed = seed
            .trim()
            .parse()
            .map_err(|_| LabError::Config(format!("{SEED_ENV} must be an unsigned 64-bit integer, got {seed:?}")))?;
    }
    Ok(config)
}

// A closed pipe (as in `uqr-lab schema | head`) is not an error.
fn print_json(value: &impl serde::Serialize) {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Some(n) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("uqr-lab: cannot start {n} worker threads: {e}");
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    }
    let outcome = match &args.command {
        Command::Schema => {
            print_json(&cli::schema());
            Ok(EXIT_PASS)
        }
        Command::Validate { config } => load(config).and_then(|c| c.resolve()).map(|r| {
            print_json(&r);
            EXIT_PASS
        }),
        Command::Run { config } => load(config).and_then(|c| cli::run(&c)).map(|report| {
            for a in &report.audits {
                eprintln!("{} {}: lhs {:.6} rhs {:.6} tol {}", if a.pass { "PASS" } else { "FAIL" }, a.name, a.lhs, a.rhs, a.tolerance);
            }
            eprintln!("verdict: {}", report.verdict);
            if report.pass {
                EXIT_PASS
            } else {
                EXIT_AUDIT_FAIL
            }
        }),
    };
    match outcome {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("uqr-lab: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
