use std::path::Path;

use log::{info, warn};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::missing::generate_missing_pattern;
use super::output::{write_config_echo, write_records_csv, write_summary};
use crate::error::{Error, Result};
use crate::filter::{EstimateRecord, Filter, FilterState};
use crate::models::{simulate_truth, Dataset};
use crate::SmcRng;

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

/// Independent generator for stream `stream` of `seed`.
///
/// Run `r` uses streams `3r` (truth), `3r + 1` (missing pattern) and
/// `3r + 2` (filter) of the master seed. A separate `pattern_seed` moves the
/// pattern to stream `r` of that seed.
pub fn stream_rng(seed: u64, stream: u64) -> SmcRng {
    let mut rng = SmcRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub struct RunOutput {
    pub run: usize,
    pub truth: Dataset,
    pub missing: Vec<usize>,
    pub records: Vec<EstimateRecord>,
    pub final_state: FilterState,
}

/// Simulates, masks and filters Monte Carlo run `run`.
pub fn run_single(cfg: &ExperimentConfig, run: usize) -> Result<RunOutput> {
    cfg.validate()?;
    let model = cfg.build_model()?;
    let r = run as u64;
    let steps = cfg.steps();
    let truth = simulate_truth(
        model.as_ref(),
        &cfg.theta_star()?,
        &cfg.x0(),
        steps,
        &mut stream_rng(cfg.seed, 3 * r),
    )?;
    let missing = match (&cfg.missing.indices, cfg.missing.pattern_seed) {
        (Some(idx), _) => {
            let mut idx = idx.clone();
            idx.sort_unstable();
            idx.dedup();
            idx
        }
        (None, Some(ps)) => generate_missing_pattern(steps, cfg.missing.percent, &mut stream_rng(ps, r)),
        (None, None) => {
            generate_missing_pattern(steps, cfg.missing.percent, &mut stream_rng(cfg.seed, 3 * r + 1))
        }
    };
    let data = truth.with_missing(&missing);
    let mut filter = Filter::with_rng(
        model.as_ref(),
        &cfg.prior(),
        cfg.filter_config(),
        stream_rng(cfg.seed, 3 * r + 2),
    )?;
    let records = filter.run(&data)?;
    Ok(RunOutput {
        run,
        truth,
        missing,
        records,
        final_state: filter.into_state(),
    })
}

/// Across-run statistics of the final parameter estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub schema_version: u32,
    pub model: String,
    pub parameter_names: Vec<String>,
    pub true_values: Vec<f64>,
    /// Mean over runs of the final-time parameter estimate.
    pub mean: Vec<f64>,
    /// Sample standard deviation (divisor `n - 1`) over runs; zero for a
    /// single run.
    pub std: Vec<f64>,
    pub runs_requested: usize,
    pub runs_effective: usize,
    pub single_run: bool,
    pub failed_runs: Vec<usize>,
    pub config: ExperimentConfig,
}

impl McSummary {
    /// Reduces per-run final estimates, visited in increasing run order.
    pub fn from_finals(
        cfg: &ExperimentConfig,
        parameter_names: Vec<String>,
        finals: &[(usize, Vec<f64>)],
        failed_runs: Vec<usize>,
    ) -> Result<Self> {
        let mut sorted: Vec<&(usize, Vec<f64>)> = finals.iter().collect();
        sorted.sort_by_key(|(r, _)| *r);
        let r = parameter_names.len();
        let n = sorted.len();
        let mut mean = vec![0.0; r];
        let mut std = vec![0.0; r];
        if n > 0 {
            for (_, th) in &sorted {
                for k in 0..r {
                    mean[k] += th[k];
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            if n > 1 {
                for (_, th) in &sorted {
                    for k in 0..r {
                        std[k] += (th[k] - mean[k]).powi(2);
                    }
                }
                std.iter_mut().for_each(|s| *s = (*s / (n - 1) as f64).sqrt());
            }
        }
        Ok(Self {
            schema_version: SUMMARY_SCHEMA_VERSION,
            model: cfg.model.as_str().to_string(),
            parameter_names,
            true_values: cfg.theta_star()?,
            mean,
            std,
            runs_requested: cfg.mc_runs,
            runs_effective: n,
            single_run: n == 1,
            failed_runs,
            config: cfg.clone(),
        })
    }
}

pub struct McOutcome {
    pub summary: McSummary,
    /// Final estimates per successful run.
    pub finals: Vec<(usize, Vec<f64>)>,
}

/// Runs `cfg.mc_runs` replications. With `out_dir` it writes
/// `run_<r>.csv`, `summary.json` and `config.echo.json` there.
///
/// A run that fails for a numeric reason is logged and excluded; a
/// configuration error aborts.
pub fn run_mc(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<McOutcome> {
    cfg.validate()?;
    let model = cfg.build_model()?;
    let names = model.param_names();
    let nx = model.state_dim();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_config_echo(&dir.join("config.echo.json"), cfg)?;
    }
    let mut finals = Vec::new();
    let mut failed = Vec::new();
    for run in 0..cfg.mc_runs {
        match run_single(cfg, run) {
            Ok(out) => {
                if let Some(dir) = out_dir {
                    write_records_csv(&dir.join(format!("run_{run}.csv")), &out.records, &names, nx)?;
                }
                let last = out.records.last().map(|r| r.theta_hat.clone()).unwrap_or_default();
                info!("run {run}: final estimate {last:?}");
                finals.push((run, last));
            }
            Err(e @ (Error::Config(_) | Error::Io { .. })) => return Err(e),
            Err(e) => {
                warn!("run {run} failed and is excluded: {e}");
                failed.push(run);
            }
        }
    }
    let summary = McSummary::from_finals(cfg, names, &finals, failed)?;
    if let Some(dir) = out_dir {
        write_summary(&dir.join("summary.json"), &summary)?;
    }
    Ok(McOutcome { summary, finals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn streams_are_distinct_and_reproducible() {
        let a = stream_rng(1, 0).next_u64();
        let b = stream_rng(1, 1).next_u64();
        assert_ne!(a, b);
        assert_eq!(a, stream_rng(1, 0).next_u64());
    }

    #[test]
    fn single_run_summary_has_zero_std() {
        let cfg = ExperimentConfig {
            mc_runs: 1,
            ..Default::default()
        };
        let names: Vec<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let s = McSummary::from_finals(&cfg, names, &[(0, vec![1.0, 2.0])], vec![]).unwrap();
        assert!(s.single_run);
        assert_eq!(s.std, vec![0.0, 0.0]);
        assert_eq!(s.mean, vec![1.0, 2.0]);
    }

    #[test]
    fn sample_std_uses_n_minus_one() {
        let cfg = ExperimentConfig::default();
        let names = vec!["a".to_string()];
        let finals = [(1, vec![3.0]), (0, vec![1.0])];
        let s = McSummary::from_finals(&cfg, names, &finals, vec![]).unwrap();
        assert_eq!(s.mean, vec![2.0]);
        assert!((s.std[0] - 2f64.sqrt()).abs() < 1e-15);
    }
}
