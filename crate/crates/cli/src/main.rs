use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use reflmap_cli::{commands, CliError, ExperimentConfig, OUT_ENV};

#[derive(Parser)]
#[command(name = "reflmap", version, about = "Reflection-map localization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML experiment config; the desk-scale defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: config `output_dir`, then $REFLMAP_OUT, then ./reflmap-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// `dotted.key=value` applied on top of the config file.
    #[arg(long = "override", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate the environment and the offline and online measurement logs.
    Simulate,
    /// Recover the reflector map and its sheaf from the offline log.
    BuildMap,
    /// Localize the online log against the sheaf.
    Localize,
    /// Error CDFs over the noise and path-count grid.
    ExperimentCdf,
    /// Ambiguity bound sweep and Monte Carlo dominance check.
    Bounds,
}

fn load(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p, &cli.overrides)?,
        None => {
            let mut t: toml::Table = toml::from_str(&ExperimentConfig::desk_default(0).to_toml()?)?;
            for o in &cli.overrides {
                reflmap_cli::apply_override(&mut t, o)?;
            }
            ExperimentConfig::from_value(t)?
        }
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = load(cli)?;
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("reflmap-out"));
    match cli.command {
        Command::Simulate => {
            let s = commands::cmd_simulate(&cfg, &out)?;
            println!("{} reflectors, {} test points, {} offline paths", s.reflectors, s.test_points, s.offline_paths);
        }
        Command::BuildMap => {
            let s = commands::cmd_build_map(&cfg, &out)?;
            println!("{} samples, sheaf {:.2} m², reflector coverage {:.3}", s.samples, s.sheaf_area_m2, s.reflector_coverage);
        }
        Command::Localize => {
            let (s, _) = commands::cmd_localize(&cfg, &out)?;
            println!("{} epochs ({} blind), median error {:?} m", s.epochs, s.blind, s.median_error_m);
        }
        Command::ExperimentCdf => {
            for (_, s) in commands::cmd_experiment_cdf(&cfg, &out)? {
                let flag = if s.all_blind { "  ALL BLIND" } else { "" };
                println!(
                    "{:>30}  n={:<5} median {:.3} m  [{:.3}, {:.3}]{flag}",
                    s.cell().label(),
                    s.trials,
                    s.median_m,
                    s.p25_m,
                    s.p75_m
                );
            }
        }
        Command::Bounds => {
            for r in commands::cmd_bounds(&cfg, &out)? {
                println!(
                    "ratio {:>5}: bound {:.3} m², empirical {:.3} m², violations {}",
                    r.ratio, r.bound_m2, r.empirical_area_m2, r.violations
                );
            }
        }
    }
    eprintln!("outputs in {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
