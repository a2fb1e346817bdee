use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{FilterConfig, FreezeRule};
use crate::model::{PriorSpec, SystemModel};
use crate::models::{Example1, Example1Config, Example2Config};
use crate::resample::ResampleScheme;
use crate::tuner::TuningConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelId {
    Example1,
    Example2,
}

impl ModelId {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelId::Example1 => "example1",
            ModelId::Example2 => "example2",
        }
    }

    pub fn default_steps(self) -> usize {
        match self {
            ModelId::Example1 => 1000,
            ModelId::Example2 => 100,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MissingConfig {
    /// Share of time indices without a measurement, in percent.
    pub percent: f64,
    /// Seed for the pattern stream; defaults to the master seed.
    pub pattern_seed: Option<u64>,
    /// Explicit missing time indices; overrides `percent`.
    pub indices: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub initial_h: f64,
    pub resampler: ResampleScheme,
    pub resample_ess_frac: f64,
    pub freeze: Option<FreezeRule>,
}

impl Default for FilterSection {
    fn default() -> Self {
        let d = FilterConfig::default();
        Self {
            initial_h: d.initial_h,
            resampler: d.resampler,
            resample_ess_frac: d.resample_ess_frac,
            freeze: d.freeze,
        }
    }
}

/// Settings applied by `--paper-scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PaperScale {
    pub n_particles: usize,
    pub mc_runs: usize,
}

impl Default for PaperScale {
    fn default() -> Self {
        Self {
            n_particles: 20_000,
            mc_runs: 45,
        }
    }
}

/// One experiment, read from a TOML document.
///
/// ```toml
/// model = "example1"
/// n_particles = 5000
/// steps = 1000
/// mc_runs = 10
/// seed = 1
///
/// [missing]
/// percent = 25
///
/// [tuner]
/// mode = "kl"          # or "fixed:0.1"
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelId,
    pub n_particles: usize,
    /// Number of time steps `T`; the model's default when absent.
    pub steps: Option<usize>,
    pub mc_runs: usize,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub missing: MissingConfig,
    pub filter: FilterSection,
    pub tuner: TuningConfig,
    pub example1: Example1Config,
    pub example2: Example2Config,
    pub paper_scale: PaperScale,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelId::Example1,
            n_particles: 5000,
            steps: None,
            mc_runs: 10,
            seed: 1,
            output_dir: None,
            missing: MissingConfig::default(),
            filter: FilterSection::default(),
            tuner: TuningConfig::default(),
            example1: Example1Config::default(),
            example2: Example2Config::default(),
            paper_scale: PaperScale::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps.unwrap_or_else(|| self.model.default_steps())
    }

    pub fn apply_paper_scale(&mut self) {
        self.n_particles = self.paper_scale.n_particles;
        self.mc_runs = self.paper_scale.mc_runs;
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_particles < 2 {
            return Err(Error::Config("n_particles must be at least 2".into()));
        }
        if self.mc_runs < 1 {
            return Err(Error::Config("mc_runs must be at least 1".into()));
        }
        if self.steps() < 1 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(0.0..=100.0).contains(&self.missing.percent) {
            return Err(Error::Config(format!(
                "missing.percent = {} is outside [0, 100]",
                self.missing.percent
            )));
        }
        if let Some(idx) = &self.missing.indices {
            if idx.iter().any(|&t| t < 1 || t > self.steps()) {
                return Err(Error::Config("missing.indices must lie in [1, steps]".into()));
            }
        }
        self.filter_config().validate()?;
        match self.model {
            ModelId::Example1 => self.example1.validate(),
            ModelId::Example2 => self.example2.validate(),
        }
    }

    pub fn filter_config(&self) -> FilterConfig {
        FilterConfig {
            n_particles: self.n_particles,
            initial_h: self.filter.initial_h,
            tuner: self.tuner.clone(),
            resampler: self.filter.resampler,
            resample_ess_frac: self.filter.resample_ess_frac,
            freeze: self.filter.freeze,
        }
    }

    pub fn build_model(&self) -> Result<Box<dyn SystemModel>> {
        Ok(match self.model {
            ModelId::Example1 => {
                self.example1.validate()?;
                Box::new(Example1::new())
            }
            ModelId::Example2 => Box::new(self.example2.model()?),
        })
    }

    pub fn prior(&self) -> PriorSpec {
        match self.model {
            ModelId::Example1 => self.example1.prior(),
            ModelId::Example2 => self.example2.prior(),
        }
    }

    /// True natural parameters used to simulate the data.
    pub fn theta_star(&self) -> Result<Vec<f64>> {
        match self.model {
            ModelId::Example1 => Ok(self.example1.theta_star.clone()),
            ModelId::Example2 => self.example2.theta_star(),
        }
    }

    pub fn x0(&self) -> Vec<f64> {
        match self.model {
            ModelId::Example1 => vec![self.example1.x0],
            ModelId::Example2 => vec![self.example2.x0],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tuner::TunerMode;

    #[test]
    fn minimal_document_uses_defaults() {
        let c = ExperimentConfig::from_toml_str("model = \"example2\"\n").unwrap();
        assert_eq!(c.steps(), 100);
        assert_eq!(c.n_particles, 5000);
        assert_eq!(c.theta_star().unwrap(), vec![2.0, 25.0, 8.0, 0.05, 0.1, 0.1]);
    }

    #[test]
    fn sections_parse() {
        let text = r#"
model = "example1"
n_particles = 200
steps = 50
mc_runs = 3
seed = 9

[missing]
percent = 25

[tuner]
mode = "fixed:0.1"
grid_points = 11

[filter]
resampler = "residual"

[example2]
gamma_ratio = 10
"#;
        let c = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(c.tuner.mode, TunerMode::Fixed(0.1));
        assert_eq!(c.tuner.grid_points, 11);
        assert_eq!(c.filter.resampler, ResampleScheme::Residual);
        assert_eq!(c.missing.percent, 25.0);
        assert_eq!(c.example2.noise_variances().unwrap(), (1.0, 0.1));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in [
            "n_particles = 1",
            "mc_runs = 0",
            "[missing]\npercent = 120",
            "[tuner]\nmode = \"sometimes\"",
            "unknown_key = 3",
            "model = \"example2\"\n[example2]\nalpha = 0.0",
        ] {
            assert!(
                matches!(ExperimentConfig::from_toml_str(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn paper_scale_override() {
        let mut c = ExperimentConfig::default();
        c.apply_paper_scale();
        assert_eq!((c.n_particles, c.mc_runs), (20_000, 45));
    }
}
