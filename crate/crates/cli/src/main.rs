use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};
use timelocal_cli::config::ScenarioConfig;
use timelocal_cli::runner::{run_to_files, Job, Overrides, RunError};
use timelocal_cli::scenarios::builtins;
use timelocal_cli::Format;

/// Runs built-in scenarios or JSON-configured systems and writes
/// figure-ready tables.
#[derive(Parser)]
#[command(name = "simulate", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a built-in scenario or a configuration file.
    #[command(group(ArgGroup::new("source").required(true).args(["scenario", "config"])))]
    Run {
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Time step in seconds.
        #[arg(long)]
        dt: Option<f64>,
        /// Data file; metadata goes to `<out>.meta.json`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        format: Option<Format>,
    },
    /// List the built-in scenarios.
    List,
    /// Parse and check a configuration file without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

/// Caps the worker pool at `SIM_THREADS` when set.
fn init_threads() -> Result<(), RunError> {
    let Ok(value) = std::env::var("SIM_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| RunError::Config(format!("SIM_THREADS: expected a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| RunError::Config(format!("SIM_THREADS: {e}")))
}

fn run(command: Command) -> Result<(), RunError> {
    match command {
        Command::List => {
            for s in builtins() {
                println!("{:<12} {}", s.name, s.description);
            }
            Ok(())
        }
        Command::Validate { config } => {
            let cfg = ScenarioConfig::load(&config)?;
            println!("ok: {} ({}), hash {}", cfg.name, cfg.engine, cfg.hash());
            Ok(())
        }
        Command::Run {
            scenario,
            config,
            seed,
            dt,
            out,
            format,
        } => {
            init_threads()?;
            let overrides = Overrides { seed, dt, format, out: out.clone() };
            let job = match (scenario, config) {
                (Some(name), _) => Job::builtin(&name, &overrides)?,
                (None, Some(path)) => Job::config(ScenarioConfig::load(&path)?, &overrides)?,
                (None, None) => unreachable!("clap requires a source"),
            };
            let summary = run_to_files(&job, format, out.as_deref())?;
            println!(
                "{}: {} rows -> {} ({:.2} s)",
                summary.metadata.scenario,
                summary.metadata.rows,
                summary.data_path.display(),
                summary.metadata.wall_time_s
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
