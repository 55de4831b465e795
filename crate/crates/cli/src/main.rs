//! `carnot-flow`: batch experiment driver for sub-Riemannian heat flow and
//! Wasserstein entropy flow experiments.
//!
//! Exit codes: 0 success, 1 check failure or runtime error, 2 config error.

mod artifacts;
mod config;
mod runner;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "carnot-flow", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Path to the experiment config (JSON, schema 1)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for artifacts
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Override the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap worker threads (also honored from CARNOT_FLOW_THREADS)
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Evolve the configured initial density and write diagnostics
    HeatRun,
    /// Heat-kernel property report (mass, symmetry, scaling, envelopes)
    KernelCheck,
    /// d/dt Ent = -Fisher along the heat trace
    DissipationCheck,
    /// Energy dissipation identity on dyadic subintervals
    EdiCheck,
    /// Minimizing-movement chain and comparison with the heat flow
    JkoRun,
    /// Wasserstein distance between the initial and evolved densities
    OtDist,
    /// Bakry-Emery violation search and reverse Poincare constant
    CdCheck,
    /// HWI inequality on random pairs
    HwiCheck,
    /// Run every configured check
    All,
    /// Convert artifacts in --out into gnuplot-ready .dat files
    EmitPlotData,
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    let threads = cli.threads.or_else(|| {
        std::env::var("CARNOT_FLOW_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(t) = threads {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build_global();
    }

    if matches!(cli.command, Command::EmitPlotData) {
        return match artifacts::emit_plot_data(&cli.out) {
            Ok(files) => {
                for f in files {
                    println!("wrote {}", f.display());
                }
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("emit-plot-data: {e:#}");
                ExitCode::from(1)
            }
        };
    }

    let config_path = match &cli.config {
        Some(p) => p.clone(),
        None => {
            eprintln!("error: --config is required for this subcommand");
            return ExitCode::from(2);
        }
    };
    let cfg = match config::ExperimentConfig::load(&config_path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let experiment = match runner::Experiment::new(cfg, cli.seed) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("config error: {e:#}");
            return ExitCode::from(2);
        }
    };
    if let Err(e) = std::fs::create_dir_all(&cli.out) {
        eprintln!("cannot create output dir: {e}");
        return ExitCode::from(1);
    }

    let result = match cli.command {
        Command::HeatRun => experiment.heat_run(&cli.out),
        Command::KernelCheck => experiment.kernel_check(&cli.out),
        Command::DissipationCheck => experiment.dissipation_check(&cli.out),
        Command::EdiCheck => experiment.edi_check(&cli.out),
        Command::JkoRun => experiment.jko_run(&cli.out),
        Command::OtDist => experiment.ot_dist(&cli.out),
        Command::CdCheck => experiment.cd_check(&cli.out),
        Command::HwiCheck => experiment.hwi_check(&cli.out),
        Command::All => experiment.all(&cli.out),
        Command::EmitPlotData => unreachable!(),
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
