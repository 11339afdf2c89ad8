//! Command-line driver for pulse-robustness experiments.
//!
//! Exit codes: 0 on success, 1 on configuration errors, 2 when a numerical
//! invariant check failed during the run.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use blochpulse::config::{load_config, ExperimentConfig};
use blochpulse::report::{repro_figure, run_experiment, Report, FIGURE_IDS};

#[derive(Parser)]
#[command(name = "blochpulse", version, about = "Composite-pulse robustness analysis on the Bloch sphere")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunOptions {
    /// Output directory for the result bundle.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads (0 = all available cores).
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Fail on unknown config keys (pass --strict=false to ignore them).
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    strict: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        config: PathBuf,
        #[command(flatten)]
        options: RunOptions,
    },
    /// Parse and validate a config file without running it.
    Validate {
        config: PathBuf,
        /// Fail on unknown config keys (pass --strict=false to ignore them).
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        strict: bool,
    },
    /// Regenerate the data bundle behind one of the reference figures.
    Repro {
        /// One of: fig1a, fig1b, fig2, fig3, fig4, fig5, fig6, fig7.
        figure: String,
        #[command(flatten)]
        options: RunOptions,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, options } => {
            let parsed = match load_config(&config, options.strict) {
                Ok(parsed) => parsed,
                Err(e) => {
                    eprintln!("config error: {e}");
                    return ExitCode::from(1);
                }
            };
            configure_threads(options.threads);
            match run_experiment(&parsed, &options.out_dir) {
                Ok(report) => finish(report),
                Err(e) => {
                    eprintln!("run failed: {e}");
                    ExitCode::from(2)
                }
            }
        }
        Command::Validate { config, strict } => match load_config(&config, strict) {
            Ok(parsed) => {
                print_plan(&parsed);
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("config error: {e}");
                ExitCode::from(1)
            }
        },
        Command::Repro { figure, options } => {
            if !FIGURE_IDS.contains(&figure.as_str()) {
                eprintln!(
                    "config error: unknown figure `{figure}` (expected one of {})",
                    FIGURE_IDS.join(", ")
                );
                return ExitCode::from(1);
            }
            configure_threads(options.threads);
            match repro_figure(&figure, &options.out_dir) {
                Ok(reports) => {
                    let mut status = ExitCode::SUCCESS;
                    for report in reports {
                        let code = finish(report);
                        if code != ExitCode::SUCCESS {
                            status = code;
                        }
                    }
                    status
                }
                Err(e) => {
                    eprintln!("repro failed: {e}");
                    ExitCode::from(2)
                }
            }
        }
    }
}

fn configure_threads(threads: usize) {
    if threads > 0 {
        // Ignore failures: the global pool can only be set once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
}

fn print_plan(config: &ExperimentConfig) {
    let analyses: Vec<&str> = config.analyses.iter().map(|a| a.label()).collect();
    println!("sequence       {}", config.sequence_text);
    println!("ensemble       {:?} [{}, {}] x {}", config.ensemble_kind, config.w_min, config.w_max, config.count);
    println!("time steps     {}", config.n_steps);
    println!("analyses       {}", analyses.join(", "));
    println!("config ok");
}

fn finish(report: Report) -> ExitCode {
    println!("wrote {} result files to {}", report.manifest.files.len(), report.out_dir.display());
    if report.violations.is_empty() {
        ExitCode::SUCCESS
    } else {
        for v in &report.violations {
            eprintln!("invariant violated: {v}");
        }
        ExitCode::from(2)
    }
}
