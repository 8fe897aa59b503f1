//! Command-line front end: closed-form tables, field simulation, cascade
//! sampling, the acceptance suite, and plot-data emission. All outputs are
//! files under --out; a run is a pure function of (config, build).

mod config;
mod report;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{parse_config, ExperimentConfig, ExperimentKind};

#[derive(Parser)]
#[command(name = "igff", version, about = "Scale-inhomogeneous free-field laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// Configuration file (TOML); flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Box sides.
    #[arg(long = "n", value_delimiter = ',')]
    ns: Option<Vec<usize>>,
    /// Inverse temperatures.
    #[arg(long = "beta", value_delimiter = ',')]
    betas: Option<Vec<f64>>,
    /// Variance multipliers.
    #[arg(long, value_delimiter = ',')]
    sigma: Option<Vec<f64>>,
    /// Scale breakpoints (strictly increasing, ending at 1).
    #[arg(long, value_delimiter = ',')]
    lambda: Option<Vec<f64>>,
    /// Deep-interior restriction parameter.
    #[arg(long)]
    rho: Option<f64>,
    /// Field samples per (n, beta).
    #[arg(long)]
    samples: Option<usize>,
    /// Master seed; all randomness derives from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0 = automatic).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form tables: speed profile, levels, entropy, free energies,
    /// the limiting two-overlap distribution and cascade parameters.
    Analytics(Overrides),
    /// Field Monte Carlo: free energies, two-overlap distributions,
    /// boundary mass.
    Simulate(Overrides),
    /// Cascade sampling: overlap atoms, identity residuals, moments, and
    /// the three-way match against field estimates.
    Rpc(Overrides),
    /// Run the acceptance suite; nonzero exit on any gate failure.
    Verify(Overrides),
    /// Emit per-figure CSVs from existing artifacts.
    Plotdata(Overrides),
}

fn load_config(kind: ExperimentKind, ov: &Overrides) -> Result<ExperimentConfig, ExitCode> {
    let mut cfg = match &ov.config {
        Some(path) => {
            let text = match std::fs::read_to_string(path) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("config error: {path:?}: {e}");
                    return Err(ExitCode::from(2));
                }
            };
            match parse_config(&text) {
                Ok(c) => c,
                Err(violations) => {
                    eprintln!("config error in {path:?}:");
                    for v in violations {
                        eprintln!("  {v}");
                    }
                    return Err(ExitCode::from(2));
                }
            }
        }
        None => ExperimentConfig::default(),
    };
    cfg.kind = kind;
    if let Some(ns) = &ov.ns {
        cfg.ns = ns.clone();
    }
    if let Some(b) = &ov.betas {
        cfg.betas = b.clone();
    }
    if let Some(s) = &ov.sigma {
        cfg.sigma = s.clone();
    }
    if let Some(l) = &ov.lambda {
        cfg.lambda = l.clone();
    }
    if let Some(r) = ov.rho {
        cfg.rho = r;
    }
    if let Some(s) = ov.samples {
        cfg.field_samples = s;
    }
    if let Some(s) = ov.seed {
        cfg.master_seed = s;
    }
    if let Some(o) = &ov.out {
        cfg.out_dir = o.display().to_string();
    }
    if let Some(t) = ov.threads {
        cfg.threads = t;
    }
    let violations = cfg.validate();
    if !violations.is_empty() {
        eprintln!("config error:");
        for v in violations {
            eprintln!("  {v}");
        }
        return Err(ExitCode::from(2));
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, ov) = match &cli.command {
        Command::Analytics(ov) => (ExperimentKind::Analytics, ov),
        Command::Simulate(ov) => (ExperimentKind::Simulate, ov),
        Command::Rpc(ov) => (ExperimentKind::Rpc, ov),
        Command::Verify(ov) => (ExperimentKind::Verify, ov),
        Command::Plotdata(ov) => (ExperimentKind::Analytics, ov),
    };
    let cfg = match load_config(kind, ov) {
        Ok(c) => c,
        Err(code) => return code,
    };
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .ok();
    }
    let result = match cli.command {
        Command::Analytics(_) => stages::run_experiment(&cfg),
        Command::Simulate(_) => stages::run_experiment(&cfg),
        Command::Rpc(_) => stages::run_experiment(&cfg),
        Command::Verify(_) => stages::run_experiment(&cfg),
        Command::Plotdata(_) => stages::run_plotdata(&cfg),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
