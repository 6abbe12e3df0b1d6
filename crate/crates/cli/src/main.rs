use std::fs;
use std::io;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use csd_core::bridge::{serve, serve_tcp};
use csd_core::harness::check::run_checks;
use csd_core::harness::config::OracleSection;
use csd_core::harness::{emit_plotdata, exit_code, run_file, threads_from_env, with_threads};
use csd_core::schedule::ScheduleKind;
use csd_core::{CsdError, Result};

#[derive(Parser)]
#[command(name = "csd", version, about = "Collaborative score distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        config: PathBuf,
        /// Override the config's root seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in invariant checks.
    Check,
    /// Write one (step, value) series file per metric column.
    Plot {
        metrics: PathBuf,
        /// Directory for the series files (default: next to the metrics file).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Answer bridge requests from an oracle file on stdio or TCP.
    ServeOracle {
        oracle: PathBuf,
        /// Listen on this address instead of stdio.
        #[arg(long)]
        tcp: Option<String>,
        #[arg(long, value_enum, default_value_t = Schedule::VpCosine)]
        schedule: Schedule,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Schedule {
    VpCosine,
    VpLinear,
}

impl From<Schedule> for ScheduleKind {
    fn from(s: Schedule) -> Self {
        match s {
            Schedule::VpCosine => ScheduleKind::VpCosine,
            Schedule::VpLinear => ScheduleKind::VpLinear,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = threads_from_env().and_then(|threads| with_threads(threads, || execute(cli.command))?);
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

fn execute(command: Command) -> Result<u8> {
    match command {
        Command::Run { config, seed, out } => {
            let summary = run_file(&config, seed, out.as_deref())?;
            println!(
                "{} run finished: {} steps, outputs in {}",
                serde_json::to_string(&summary.mode)?.trim_matches('"'),
                summary.steps,
                summary.output_dir.display()
            );
            Ok(if summary.checks_failed > 0 { 1 } else { 0 })
        }
        Command::Check => {
            let outcomes = run_checks();
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            for o in &outcomes {
                println!("{} {} {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
            }
            println!("{} of {} checks passed", outcomes.len() - failed, outcomes.len());
            Ok(if failed > 0 { 1 } else { 0 })
        }
        Command::Plot { metrics, out } => {
            let dir = out.unwrap_or_else(|| metrics.parent().unwrap_or(Path::new(".")).join("plot"));
            let files = emit_plotdata(&metrics, &dir)?;
            for f in files {
                println!("{}", f.display());
            }
            Ok(0)
        }
        Command::ServeOracle { oracle, tcp, schedule } => {
            let text = fs::read_to_string(&oracle)?;
            let section: OracleSection = serde_json::from_str(&text)?;
            let edit = section
                .edit_oracle()
                .ok_or_else(|| CsdError::config("oracle", "a bridge endpoint cannot be served"))?;
            edit.validate()?;
            match tcp {
                None => {
                    let stats = serve(io::stdin().lock(), io::stdout().lock(), &edit, schedule.into())?;
                    log::info!("answered {}, errors {}, skipped {}", stats.answered, stats.errors, stats.skipped);
                }
                Some(addr) => {
                    let listener = TcpListener::bind(&addr)?;
                    eprintln!("listening on {}", listener.local_addr()?);
                    serve_tcp(&listener, &edit, schedule.into(), None)?;
                }
            }
            Ok(0)
        }
    }
}
