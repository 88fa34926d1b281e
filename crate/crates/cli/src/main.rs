use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use oed_cli::commands::{run_compare, run_design, run_rank_study, run_spectrum, run_trace_study};
use oed_cli::{OedConfig, Result};

/// Sparse A-optimal sensor placement for advection-diffusion inversion.
#[derive(Parser)]
#[command(name = "oed", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML configuration; defaults are used for anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed for every random stream without an explicit seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// `section.key=value`, applied after the file; may be repeated.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Singular values of F and F̃, plus the sensor-grid sweep.
    Spectrum,
    /// ℓ1 or Φ_ε design on the configured problem.
    Design,
    /// Exact traces of optimal, random and uniform designs.
    Compare,
    /// Trace-estimator error against the number of probes.
    TraceStudy,
    /// Optimal ℓ1 objective against the surrogate rank.
    RankStudy,
}

fn load(cli: &Cli) -> Result<OedConfig> {
    let mut config = match &cli.config {
        Some(path) => OedConfig::load(path)?,
        None => OedConfig::default(),
    };
    for o in &cli.overrides {
        config.apply_override(o)?;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    config.resolve()
}

fn run(cli: &Cli) -> Result<()> {
    let config = load(cli)?;
    let out = config.output_dir.clone();
    match cli.command {
        Command::Spectrum => {
            let r = run_spectrum(&config, &out)?;
            println!("numerical rank: F {:?}, F̃ {}", r.rank_f, r.rank_ftilde);
        }
        Command::Design => {
            let r = run_design(&config, &out)?;
            println!(
                "{} sensors, exact trace {:.6e}, binary {}",
                r.active_sensors.len(),
                r.exact_trace,
                r.binary
            );
        }
        Command::Compare => {
            let r = run_compare(&config, &out)?;
            println!(
                "{} sensors: Φ_ε {:.6e}, ℓ1 {:.6e}, random mean {:.6e}",
                r.n_sensors,
                r.phi_eps_trace,
                r.l1_trace,
                r.random_mean()
            );
        }
        Command::TraceStudy => {
            for row in run_trace_study(&config, &out)?.rows {
                println!("N_tr {:>4}: mean relative error {:.4}", row.n_tr, row.mean_rel_error);
            }
        }
        Command::RankStudy => {
            for row in run_rank_study(&config, &out)?.rows {
                println!("r {:>4}: Θ {:.6}", row.rank, row.theta);
            }
        }
    }
    println!("outputs written to {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
