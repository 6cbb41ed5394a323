use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use evofed::experiment::{self, ExperimentConfig};
use evofed::Error;

#[derive(Parser)]
#[command(name = "evofed", version, about = "Federated learning by fitness exchange")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write rounds.csv and summary.json.
    Run {
        config: PathBuf,
        /// Worker threads (0 = all cores); overrides run.threads.
        #[arg(long)]
        threads: Option<usize>,
        /// Output directory; overrides run.output.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Merge finished runs into one table.
    Compare {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long, default_value = "comparison.csv")]
        out: PathBuf,
    },
    /// Report per-message uplink size against the model size.
    VerifyAccounting { config: Option<PathBuf> },
}

fn exit_for(err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(if err.is_validation() { 1 } else { 2 })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            threads,
            output,
        } => experiment::run_config_file(&config, output.as_deref(), threads).map(|o| {
            let s = &o.summary;
            println!(
                "{}: final accuracy {:.4} (max {:.4}), uplink {} B, downlink {} B -> {}",
                s.method,
                s.final_accuracy,
                s.max_accuracy,
                s.total_uplink_bytes,
                s.total_downlink_bytes,
                o.output.display()
            );
        }),
        Command::Compare { dirs, out } => experiment::compare(&dirs, &out).map(|()| println!("{}", out.display())),
        Command::VerifyAccounting { config } => (|| {
            if let Some(path) = config {
                let cfg = ExperimentConfig::from_file(&path)?;
                println!("{}", experiment::verify_config_accounting(&cfg)?);
            }
            let mut all_ok = true;
            for check in experiment::reference_configurations()? {
                all_ok &= check.reproduced;
                println!(
                    "[{}] {}: claimed >= {:.1}%, computed {:.4}%",
                    if check.reproduced { "ok" } else { "MISMATCH" },
                    check.label,
                    check.claimed_compression * 100.0,
                    check.report.compression * 100.0
                );
            }
            if all_ok {
                Ok(())
            } else {
                Err(Error::Degenerate("reference compression figures not reproduced"))
            }
        })(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => exit_for(&e),
    }
}
