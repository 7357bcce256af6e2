//! `stc`: batch front end for the stochastic transport controllability lab.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use config::{ModeChoice, RunConfig};
use error::{exit, CliError};
use output::{Output, Summary};

#[derive(Parser)]
#[command(
    name = "stc",
    version,
    about = "Controllability experiments for stochastic transport equations"
)]
struct Cli {
    /// Configuration file (`[section]` headers, `key = value` lines)
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Output directory, overrides `out` from the configuration
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,

    /// Run seed, overrides `seed` from the configuration
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mesh, velocities and inflow classification
    Geometry,
    /// Forward solve with the energy balance
    Simulate,
    /// Backward solves and the boundary trace ratio
    Backward,
    /// Exact forward/backward duality on random instances
    DualityCheck,
    /// Weighted estimate on random terminal data
    CarlemanCheck,
    /// Smallest Gramian eigenvalue
    Observability,
    /// Control synthesis towards a terminal target
    Hum,
    /// Obstructions to controllability
    Negative {
        #[command(subcommand)]
        which: Negative,
    },
}

#[derive(Subcommand)]
enum Negative {
    /// Diffusion control alone cannot move the mean
    Mean {
        #[arg(long, value_delimiter = ',')]
        depths: Option<Vec<usize>>,
    },
    /// Sign changes of the representation integrand
    Peng {
        #[arg(long, value_delimiter = ',')]
        depths: Option<Vec<usize>>,
    },
    /// Least control energy towards a localized target
    Localized {
        #[arg(long, value_delimiter = ',')]
        depths: Option<Vec<usize>>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    VOffG0,
    DriftOnly,
    Both,
}

type Runner = fn(&RunConfig, &mut Output) -> Result<Summary, CliError>;

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("STC_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("STC_THREADS must be a positive integer, got \"{v}\""))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn run(cli: Cli) -> Result<PathBuf, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = cli.out {
        cfg.out = o;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let (name, f): (&str, Runner) = match cli.command {
        Command::Geometry => ("geometry", commands::geometry),
        Command::Simulate => ("simulate", commands::simulate),
        Command::Backward => ("backward", commands::backward),
        Command::DualityCheck => ("duality-check", commands::duality_check),
        Command::CarlemanCheck => ("carleman-check", commands::carleman_check),
        Command::Observability => ("observability", commands::observability),
        Command::Hum => ("hum", commands::hum),
        Command::Negative { which } => {
            let depths = match &which {
                Negative::Mean { depths }
                | Negative::Peng { depths }
                | Negative::Localized { depths, .. } => depths.clone(),
            };
            if let Some(d) = depths {
                cfg.negative.depths = d;
            }
            match which {
                Negative::Mean { .. } => ("negative-mean", commands::negative_mean),
                Negative::Peng { .. } => ("negative-peng", commands::negative_peng),
                Negative::Localized { mode, .. } => {
                    if let Some(m) = mode {
                        cfg.negative.mode = match m {
                            Mode::VOffG0 => ModeChoice::VOffG0,
                            Mode::DriftOnly => ModeChoice::DriftOnly,
                            Mode::Both => ModeChoice::Both,
                        };
                    }
                    ("negative-localized", commands::negative_localized)
                }
            }
        }
    };
    let mut out = Output::create(&cfg.out)?;
    let summary = f(&cfg, &mut out)?;
    out.summary(name, summary, &cfg)
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() {
                exit::USAGE
            } else {
                exit::OK
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(m) = init_threads() {
        eprintln!("error: {m}");
        std::process::exit(exit::USAGE);
    }
    match run(cli) {
        Ok(path) => println!("{}", path.display()),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
