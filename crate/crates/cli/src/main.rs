use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use jointsmc::harness::{
    generate_missing_pattern, run_mc, stream_rng, write_truth_csv, ExperimentConfig, McSummary,
};
use jointsmc::models::simulate_truth;
use jointsmc::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DEGRADED: u8 = 3;

/// Joint state and parameter estimation with an adaptive particle filter.
#[derive(Parser)]
#[command(name = "jointsmc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Use the full particle and run counts from `[paper_scale]`.
        #[arg(long)]
        paper_scale: bool,
    },
    /// Run a Monte Carlo study with an explicit number of runs.
    Mc {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        runs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        paper_scale: bool,
    },
    /// Write the simulated truth of one run without filtering.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        run: usize,
    },
    /// Print the version.
    Version,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_CONFIG);
    }
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => EXIT_CONFIG,
                _ => EXIT_FAILURE,
            })
        }
    }
}

/// `SMC_THREADS` caps the worker pool. Results do not depend on it.
fn configure_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("SMC_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::Config(format!("SMC_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn output_dir(cfg: &ExperimentConfig, config_path: &Path, out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| {
        let stem = config_path.file_stem().and_then(|s| s.to_str()).unwrap_or("experiment");
        PathBuf::from("out").join(stem)
    })
}

fn dispatch(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::Version => {
            println!("jointsmc {}", env!("CARGO_PKG_VERSION"));
            Ok(ExitCode::SUCCESS)
        }
        Command::Run {
            config,
            out,
            paper_scale,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if paper_scale {
                cfg.apply_paper_scale();
            }
            experiment(&cfg, &output_dir(&cfg, &config, out))
        }
        Command::Mc {
            config,
            runs,
            out,
            paper_scale,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if paper_scale {
                cfg.apply_paper_scale();
            }
            cfg.mc_runs = runs;
            cfg.validate()?;
            experiment(&cfg, &output_dir(&cfg, &config, out))
        }
        Command::Simulate { config, out, run } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = output_dir(&cfg, &config, out);
            std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            let model = cfg.build_model()?;
            let r = run as u64;
            let data = simulate_truth(
                model.as_ref(),
                &cfg.theta_star()?,
                &cfg.x0(),
                cfg.steps(),
                &mut stream_rng(cfg.seed, 3 * r),
            )?;
            let missing = match (&cfg.missing.indices, cfg.missing.pattern_seed) {
                (Some(idx), _) => idx.clone(),
                (None, Some(ps)) => {
                    generate_missing_pattern(cfg.steps(), cfg.missing.percent, &mut stream_rng(ps, r))
                }
                (None, None) => generate_missing_pattern(
                    cfg.steps(),
                    cfg.missing.percent,
                    &mut stream_rng(cfg.seed, 3 * r + 1),
                ),
            };
            let path = dir.join(format!("truth_{run}.csv"));
            write_truth_csv(&path, &data, &missing)?;
            println!("wrote {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<ExitCode, Error> {
    let outcome = run_mc(cfg, Some(dir))?;
    print_summary(&outcome.summary);
    println!("results in {}", dir.display());
    if outcome.summary.failed_runs.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "warning: {} of {} runs failed: {:?}",
            outcome.summary.failed_runs.len(),
            outcome.summary.runs_requested,
            outcome.summary.failed_runs
        );
        Ok(ExitCode::from(EXIT_DEGRADED))
    }
}

fn print_summary(s: &McSummary) {
    println!(
        "{}: {} of {} runs, N = {}, T = {}",
        s.model,
        s.runs_effective,
        s.runs_requested,
        s.config.n_particles,
        s.config.steps()
    );
    println!("{:<10} {:>12} {:>12} {:>12}", "parameter", "true", "mean", "std");
    for (k, name) in s.parameter_names.iter().enumerate() {
        println!(
            "{:<10} {:>12.6} {:>12.6} {:>12.6}",
            name, s.true_values[k], s.mean[k], s.std[k]
        );
    }
}
