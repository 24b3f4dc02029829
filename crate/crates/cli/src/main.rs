use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use habitdual::experiment::{self, ExperimentConfig};
use habitdual::{Error, Exec};

#[derive(Parser)]
#[command(
    name = "habitdual",
    version,
    about = "Welfare bounds for habit-formation consumption rules"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a configuration key, e.g. `--set gamma=6`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Conditional-expectation backend: analytic, nested or both.
    #[arg(long, global = true)]
    backend: Option<String>,

    /// Worker threads; 1 runs sequentially.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Write output here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate the configured approximations and print a JSON report.
    Run,
    /// Sweep gamma, X0, alpha=beta and T and print the welfare-loss table as CSV.
    Table1,
    /// Print per-time quantiles of consumption, habit and dual controls as CSV.
    Plot,
    /// Print the effective configuration.
    Config,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::parse(&std::fs::read_to_string(path)?)?,
        None => ExperimentConfig::default(),
    };
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(b) = &cli.backend {
        cfg.set("condexp_backend", b)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    let exec = match cli.threads {
        Some(1) => Exec::Sequential,
        Some(0) => return Err(Error::Config("--threads must be at least 1".into())),
        Some(n) => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Config(e.to_string()))?;
            Exec::Parallel
        }
        None => Exec::Parallel,
    };
    let start = Instant::now();
    let mut text = match cli.command {
        Command::Run => experiment::run(&cfg, exec)?.to_json(),
        Command::Table1 => experiment::table1_csv(&experiment::table1(&cfg, exec)?),
        Command::Plot => experiment::emit_plot_data(&cfg, exec)?,
        Command::Config => cfg.to_kv(),
    };
    if !text.ends_with('\n') {
        text.push('\n');
    }
    match &cli.out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    eprintln!("elapsed: {:.3}s", start.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
