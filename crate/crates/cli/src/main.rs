use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use regmarket::{run_experiment, run_replication_sweep, validate_config, Overrides};

#[derive(Parser)]
#[command(
    name = "regmarket",
    about = "Regression market experiments: honest and adversarial market clearing",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment: honest market, optional attack, ledgers and summary
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: config, then $REGMARKET_OUT_DIR, then ./runs)
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Worker threads for internal parallelism (default: all cores)
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Check a config against every invariant without executing it
    Validate { config: PathBuf },
    /// Replication sweep: attacker share per K across all allocation policies
    Curve {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn set_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        // ignore failure: the global pool may already be initialized
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            seed,
            out_dir,
            threads,
        } => {
            set_threads(threads);
            match run_experiment(&config, &Overrides { seed, out_dir }) {
                Ok(artifacts) => {
                    for file in &artifacts.files {
                        println!("wrote {}", file.display());
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("{e}");
                    ExitCode::from(e.exit_code() as u8)
                }
            }
        }
        Command::Validate { config } => match validate_config(&config) {
            Ok(violations) if violations.is_empty() => {
                println!("valid");
                ExitCode::SUCCESS
            }
            Ok(violations) => {
                println!("invalid: {} violation(s)", violations.len());
                for v in violations {
                    println!("  {v}");
                }
                ExitCode::from(2)
            }
            Err(e) => {
                eprintln!("{e}");
                ExitCode::from(e.exit_code() as u8)
            }
        },
        Command::Curve {
            config,
            seed,
            out_dir,
            threads,
        } => {
            set_threads(threads);
            match run_replication_sweep(&config, &Overrides { seed, out_dir }) {
                Ok(artifacts) => {
                    for file in &artifacts.files {
                        println!("wrote {}", file.display());
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("{e}");
                    ExitCode::from(e.exit_code() as u8)
                }
            }
        }
    }
}
