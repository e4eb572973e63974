use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use bounce_core::runner::{
    bounds_report, plot_summary, run_oracle, run_scenario, write_outputs, Check, Outcome, RunOptions, ScenarioConfig,
};
use clap::{Args, Parser, Subcommand};

/// Periodic bounce orbits through penalized action continuation.
#[derive(Parser)]
#[command(name = "bounce", version)]
struct Cli {
    /// More log output (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Seed for the initial-loop perturbation.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for the summary, trace, CSV and SVG outputs.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Smallest dimensionless penalty strength of the schedule.
    #[arg(long)]
    eps_floor: Option<f64>,
    /// Number of loop nodes.
    #[arg(long = "nodes", value_name = "M")]
    nodes: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline on a scenario file.
    Solve {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Event-driven flight from the scenario's [oracle] section.
    Oracle {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate the closed-form bounds for a scenario.
    Bounds { config: PathBuf },
    /// Draw the orbit stored in a summary file.
    Plot { summary: PathBuf, svg: PathBuf },
}

fn load(path: &Path, o: Option<&Overrides>) -> Result<ScenarioConfig> {
    let mut cfg = ScenarioConfig::load(path)?;
    if let Some(o) = o {
        if let Some(seed) = o.seed {
            cfg.seed = seed;
        }
        if let Some(floor) = o.eps_floor {
            cfg.schedule.floor = floor;
        }
        if let Some(m) = o.nodes {
            cfg.nodes = m;
        }
        cfg.validate()?;
    }
    Ok(cfg)
}

fn out_dir(o: &Overrides, cfg: &ScenarioConfig) -> PathBuf {
    o.out_dir.clone().unwrap_or_else(|| PathBuf::from("out").join(&cfg.name))
}

fn threads() -> Result<Option<usize>> {
    match std::env::var("BOUNCE_SOLVE_THREADS") {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("BOUNCE_SOLVE_THREADS = {v:?}"))?)),
        Err(_) => Ok(None),
    }
}

fn report(checks: &[Check]) {
    for c in checks {
        println!("{} {}: {}", if c.pass { "ok  " } else { "FAIL" }, c.name, c.detail);
    }
}

fn status(pass: bool) -> ExitCode {
    if pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Solve { config, overrides } => {
            let cfg = load(&config, Some(&overrides))?;
            let result = run_scenario(&cfg, &RunOptions { threads: threads()? })?;
            let s = &result.summary;
            match &s.outcome {
                Outcome::Orbit(o) => println!(
                    "{}: {} impacts, period {:.9} (continuation {:.6}), Morse index {}",
                    s.name, o.bounce_count, o.period, o.period_continuation, o.morse_index
                ),
                Outcome::Collapse(c) => println!("{}: collapse {:?} at {:?}", s.name, c.kind, c.point.as_ref().map(|p| p.as_slice().to_vec())),
                Outcome::Failed { reason } => println!("{}: failed, {reason}", s.name),
            }
            report(&s.checks);
            let dir = out_dir(&overrides, &cfg);
            for path in write_outputs(&result, &cfg, &dir)? {
                log::info!("wrote {}", path.display());
            }
            Ok(status(s.pass))
        }
        Command::Oracle { config, overrides } => {
            let cfg = load(&config, Some(&overrides))?;
            let s = run_oracle(&cfg)?;
            println!("{}: {} impacts", s.name, s.bounce_count);
            if let Some(p) = &s.periodic {
                println!("periodic orbit: {} impacts, period {:.12}", p.bounce_count, p.period);
            }
            report(&s.checks);
            let dir = out_dir(&overrides, &cfg);
            std::fs::create_dir_all(&dir).with_context(|| dir.display().to_string())?;
            let path = dir.join("oracle.json");
            std::fs::write(&path, serde_json::to_string_pretty(&s)? + "\n").with_context(|| path.display().to_string())?;
            log::info!("wrote {}", path.display());
            Ok(status(s.pass))
        }
        Command::Bounds { config } => {
            let cfg = load(&config, None)?;
            println!("{}", serde_json::to_string_pretty(&bounds_report(&cfg)?)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Plot { summary, svg } => {
            let markers = plot_summary(&summary, &svg)?;
            println!("{}: {markers} impact markers", svg.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
