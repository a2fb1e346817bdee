//! The per-step filter state machine.
//!
//! Between steps the cloud holds the latest estimate of `Z_{t-1}`. A
//! measured step tunes `h`, propagates and reweights the cloud, reports the
//! filtered estimate from the weighted cloud, then resamples. A missing step
//! propagates with the previous `h`, keeps the weights, and reports the
//! predicted estimate. After `k` missing steps the cloud therefore holds the
//! `k`-step prediction that the next measurement updates.
//!
//! Shrinkage always targets the weighted mean of the current cloud. The
//! shrinkage covariance `V` is the parameter covariance of the most recent
//! measured posterior (of the prior cloud before the first measurement), so
//! it is held fixed across a gap.

use std::collections::VecDeque;
use std::path::Path;

use log::warn;
use nalgebra::DMatrix;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::cloud::{Block, EstimateKind, ParticleCloud};
use crate::error::{Error, Result};
use crate::kernel::{check_h, KernelState};
use crate::model::{Measurement, ParamTransform, PriorSpec, SystemModel};
use crate::resample::{resample, ResampleScheme};
use crate::tuner::{tune_h, Propagator, TuningConfig};
use crate::SmcRng;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Freeze the parameters once their estimate has settled: when the largest
/// relative change of the filtered parameter estimate over the last
/// `window` measured steps is below `tol`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreezeRule {
    pub window: usize,
    pub tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub n_particles: usize,
    /// Kernel parameter used before the first tuned value exists.
    pub initial_h: f64,
    pub tuner: TuningConfig,
    pub resampler: ResampleScheme,
    /// Resample when `ESS < frac * N`; any value `>= 1` resamples at every
    /// measurement.
    pub resample_ess_frac: f64,
    pub freeze: Option<FreezeRule>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            n_particles: 1000,
            initial_h: 0.1,
            tuner: TuningConfig::default(),
            resampler: ResampleScheme::Systematic,
            resample_ess_frac: 1.0,
            freeze: None,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles < 2 {
            return Err(Error::Config("n_particles must be at least 2".into()));
        }
        check_h(self.initial_h).map_err(|e| Error::Config(e.to_string()))?;
        if !(self.resample_ess_frac >= 0.0) {
            return Err(Error::Config("resample_ess_frac must be non-negative".into()));
        }
        if let Some(f) = self.freeze {
            if f.window == 0 || !(f.tol > 0.0) {
                return Err(Error::Config("freeze rule needs window >= 1 and tol > 0".into()));
            }
        }
        self.tuner.validate()
    }
}

/// What the filter reports at one time index. Parameter moments are in
/// natural units.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimateRecord {
    pub t: usize,
    pub kind: EstimateKind,
    pub missing: bool,
    pub x_hat: Vec<f64>,
    pub theta_hat: Vec<f64>,
    pub x_cov: DMatrix<f64>,
    pub theta_cov: DMatrix<f64>,
    /// Kernel parameter used to reach this time index.
    pub h_star: f64,
    pub kl: Option<f64>,
    pub ess: f64,
    /// Set when the step needed a weight reset or dropped overflowing
    /// particles.
    pub degenerate: bool,
}

impl EstimateRecord {
    pub fn theta_std(&self) -> Vec<f64> {
        (0..self.theta_cov.nrows())
            .map(|k| self.theta_cov[(k, k)].max(0.0).sqrt())
            .collect()
    }
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterState {
    pub cloud: ParticleCloud,
    /// Shrinkage moments of the last measured posterior and the previous `h`.
    pub kernel: KernelState,
    pub gap_len: usize,
    /// Time index of the next step.
    pub t: usize,
    pub rng: SmcRng,
    /// Working-coordinate parameters once frozen.
    pub frozen_params: Option<Vec<f64>>,
    /// Recent filtered parameter estimates for the freeze rule.
    pub theta_history: VecDeque<Vec<f64>>,
}

pub struct Filter<'m> {
    model: &'m dyn SystemModel,
    cfg: FilterConfig,
    transforms: Vec<ParamTransform>,
    state: FilterState,
}

impl<'m> Filter<'m> {
    /// Draws `n_particles` from the prior with a generator seeded by `seed`.
    pub fn init(
        model: &'m dyn SystemModel,
        prior: &PriorSpec,
        cfg: FilterConfig,
        seed: u64,
    ) -> Result<Self> {
        Self::with_rng(model, prior, cfg, SmcRng::seed_from_u64(seed))
    }

    pub fn with_rng(
        model: &'m dyn SystemModel,
        prior: &PriorSpec,
        cfg: FilterConfig,
        mut rng: SmcRng,
    ) -> Result<Self> {
        cfg.validate()?;
        if prior.state_dim() != model.state_dim() {
            return Err(Error::Config(format!(
                "prior has {} state entries but the model has {}",
                prior.state_dim(),
                model.state_dim()
            )));
        }
        let transforms = model.transforms();
        let sampler = prior.sampler(&transforms)?;
        let (nx, r) = (model.state_dim(), model.param_dim());
        let d = nx + r;
        let n = cfg.n_particles;
        let mut data = vec![0.0; d * n];
        for col in data.chunks_mut(d) {
            sampler.draw_working(&mut rng, col);
        }
        let cloud = ParticleCloud::uniform(nx, r, DMatrix::from_vec(d, n, data))?;
        let moments = cloud.weighted_moments(Block::Parameter)?;
        let kernel = KernelState::new(cfg.initial_h, moments.mean, &moments.covariance)?;
        Ok(Self {
            model,
            cfg,
            transforms,
            state: FilterState {
                cloud,
                kernel,
                gap_len: 0,
                t: 1,
                rng,
                frozen_params: None,
                theta_history: VecDeque::new(),
            },
        })
    }

    /// Continues from a saved state.
    pub fn from_state(model: &'m dyn SystemModel, cfg: FilterConfig, state: FilterState) -> Result<Self> {
        cfg.validate()?;
        if state.cloud.state_dim() != model.state_dim() || state.cloud.param_dim() != model.param_dim() {
            return Err(Error::Checkpoint("saved cloud does not match the model".into()));
        }
        Ok(Self {
            model,
            transforms: model.transforms(),
            cfg,
            state,
        })
    }

    pub fn state(&self) -> &FilterState {
        &self.state
    }

    pub fn into_state(self) -> FilterState {
        self.state
    }

    pub fn config(&self) -> &FilterConfig {
        &self.cfg
    }

    pub fn transforms(&self) -> &[ParamTransform] {
        &self.transforms
    }

    /// Processes the next time index; `m.t` must equal `state().t`.
    pub fn step(&mut self, m: &Measurement) -> Result<EstimateRecord> {
        if m.t != self.state.t {
            return Err(Error::Config(format!(
                "expected time index {}, got {}",
                self.state.t, m.t
            )));
        }
        match &m.y {
            Some(y) => self.step_with_measurement(y, m.u.as_deref()),
            None => self.step_missing(m.u.as_deref()),
        }
    }

    pub fn run(&mut self, data: &[Measurement]) -> Result<Vec<EstimateRecord>> {
        data.iter().map(|m| self.step(m)).collect()
    }

    /// Shrinkage target from the current cloud, covariance from the last
    /// measured posterior.
    fn shrink_kernel(&self) -> Result<KernelState> {
        let mut k = self.state.kernel.clone();
        k.theta_hat = self
            .state
            .cloud
            .weighted_moments(Block::Parameter)?
            .mean
            .as_slice()
            .to_vec();
        Ok(k)
    }

    pub fn step_with_measurement(&mut self, y: &[f64], u: Option<&[f64]>) -> Result<EstimateRecord> {
        let t = self.state.t;
        let kernel = self.shrink_kernel()?;
        let h_prev = self.state.kernel.h;
        let frozen = self.state.frozen_params.is_some();
        let tuner = if frozen {
            TuningConfig::fixed(0.0)
        } else {
            self.cfg.tuner.clone()
        };
        let outcome = tune_h(
            &self.state.cloud,
            &kernel,
            t - 1,
            y,
            u,
            self.model,
            &tuner,
            &mut self.state.rng,
        );
        let (posterior, h, kl, degenerate) = match outcome {
            Ok(r) => (r.proposed_cloud, r.h_star, Some(r.kl_value), false),
            Err(Error::TuningFailed) => {
                warn!("t = {t}: every candidate h lost all weight; propagating with h = {h_prev} and uniform weights");
                let prop = Propagator::new(self.model, &self.state.cloud, &kernel, t - 1, u)?
                    .with_transition_params(self.cfg.tuner.transition_params);
                let noise = prop.draw_noise(&mut self.state.rng);
                let p = prop.propose(h_prev, &noise, None)?;
                let n = self.state.cloud.len();
                let lw = vec![-(n as f64).ln(); n];
                (self.finite_cloud(p.particles, lw, t)?, h_prev, None, true)
            }
            Err(e) => return Err(e),
        };

        let est = posterior.point_estimate(EstimateKind::Filtered, &self.transforms)?;
        let ess = posterior.effective_sample_size()?;
        if !frozen {
            self.state
                .kernel
                .set_moments(&posterior.weighted_moments(Block::Parameter)?);
        }
        self.state.kernel.h = h;

        let n = posterior.len() as f64;
        self.state.cloud = if self.cfg.resample_ess_frac >= 1.0 || ess < self.cfg.resample_ess_frac * n {
            resample(&posterior, self.cfg.resampler, &mut self.state.rng)?
        } else {
            posterior
        };
        self.state.gap_len = 0;
        self.state.t += 1;

        let theta_hat = est.theta_mean.as_slice().to_vec();
        if !frozen {
            self.maybe_freeze(&theta_hat);
        }
        Ok(EstimateRecord {
            t,
            kind: EstimateKind::Filtered,
            missing: false,
            x_hat: est.x_mean.as_slice().to_vec(),
            theta_hat,
            x_cov: est.x_cov,
            theta_cov: est.theta_cov,
            h_star: h,
            kl,
            ess,
            degenerate,
        })
    }

    pub fn step_missing(&mut self, u: Option<&[f64]>) -> Result<EstimateRecord> {
        let t = self.state.t;
        let kernel = self.shrink_kernel()?;
        let h = if self.state.frozen_params.is_some() {
            0.0
        } else {
            self.state.kernel.h
        };
        let prop = Propagator::new(self.model, &self.state.cloud, &kernel, t - 1, u)?
            .with_transition_params(self.cfg.tuner.transition_params);
        let noise = prop.draw_noise(&mut self.state.rng);
        let p = prop.propose(h, &noise, None)?;
        let degenerate = p.non_finite > 0;
        let lw = self.state.cloud.log_weights().to_vec();
        let cloud = self.finite_cloud(p.particles, lw, t)?;

        let est = cloud.point_estimate(EstimateKind::Predicted, &self.transforms)?;
        let ess = cloud.effective_sample_size()?;
        self.state.cloud = cloud;
        self.state.gap_len += 1;
        self.state.t += 1;
        Ok(EstimateRecord {
            t,
            kind: EstimateKind::Predicted,
            missing: true,
            x_hat: est.x_mean.as_slice().to_vec(),
            theta_hat: est.theta_mean.as_slice().to_vec(),
            x_cov: est.x_cov,
            theta_cov: est.theta_cov,
            h_star: h,
            kl: None,
            ess,
            degenerate,
        })
    }

    /// Builds the propagated cloud, zeroing the weight of any particle whose
    /// state overflowed. Weights are untouched when every state is finite.
    fn finite_cloud(&self, particles: DMatrix<f64>, mut log_weights: Vec<f64>, t: usize) -> Result<ParticleCloud> {
        let nx = self.state.cloud.state_dim();
        let mut dropped = 0;
        for (i, col) in particles.column_iter().enumerate() {
            if col.rows(0, nx).iter().any(|v| !v.is_finite()) {
                log_weights[i] = f64::NEG_INFINITY;
                dropped += 1;
            }
        }
        let mut cloud = ParticleCloud::from_parts(nx, self.state.cloud.param_dim(), particles, log_weights)?;
        if dropped > 0 {
            warn!("t = {t}: dropped {dropped} particles with non-finite states");
            cloud.normalize().map_err(|_| Error::Numeric {
                index: 0,
                what: format!("every propagated state overflowed at t = {t}"),
            })?;
        } else if !cloud.is_normalized() {
            cloud.normalize()?;
        }
        Ok(cloud)
    }

    fn maybe_freeze(&mut self, theta_hat: &[f64]) {
        let Some(rule) = self.cfg.freeze else {
            return;
        };
        let hist = &mut self.state.theta_history;
        hist.push_back(theta_hat.to_vec());
        while hist.len() > rule.window + 1 {
            hist.pop_front();
        }
        if hist.len() < rule.window + 1 {
            return;
        }
        let settled = hist.iter().all(|past| {
            past.iter().zip(theta_hat).all(|(p, c)| {
                let scale = c.abs().max(f64::MIN_POSITIVE);
                (c - p).abs() / scale < rule.tol
            })
        });
        if !settled {
            return;
        }
        let working: Vec<f64> = theta_hat
            .iter()
            .zip(&self.transforms)
            .map(|(&v, tr)| tr.to_working(v))
            .collect();
        let nx = self.state.cloud.state_dim();
        let parts = self.state.cloud.particles_mut();
        for mut col in parts.column_iter_mut() {
            for (k, &w) in working.iter().enumerate() {
                col[nx + k] = w;
            }
        }
        let r = working.len();
        self.state.kernel.theta_hat = working.clone();
        self.state.kernel.v_theta = vec![0.0; r * r];
        self.state.kernel.h = 0.0;
        self.state.frozen_params = Some(working);
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&Checkpoint::capture(&self.cfg, &self.state))
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(model: &'m dyn SystemModel, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cp: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let (cfg, state) = cp.restore()?;
        Self::from_state(model, cfg, state)
    }
}

/// Runs a whole dataset from a fresh prior draw.
pub fn run_filter(
    model: &dyn SystemModel,
    prior: &PriorSpec,
    data: &[Measurement],
    cfg: &FilterConfig,
    seed: u64,
) -> Result<Vec<EstimateRecord>> {
    let mut f = Filter::init(model, prior, cfg.clone(), seed)?;
    f.run(data)
}

/// On-disk filter state. Floating-point arrays are stored as IEEE-754 bit
/// patterns so that resuming is exact even for non-finite entries.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config: FilterConfig,
    n_state: usize,
    n_param: usize,
    /// Column-major `(n_state + n_param) x N` particle matrix.
    particles: Vec<u64>,
    log_weights: Vec<u64>,
    kernel_h: u64,
    kernel_theta_hat: Vec<u64>,
    kernel_v_theta: Vec<u64>,
    gap_len: usize,
    t: usize,
    rng: SmcRng,
    frozen_params: Option<Vec<u64>>,
    theta_history: Vec<Vec<u64>>,
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn floats(v: &[u64]) -> Vec<f64> {
    v.iter().map(|&b| f64::from_bits(b)).collect()
}

impl Checkpoint {
    fn capture(cfg: &FilterConfig, s: &FilterState) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config: cfg.clone(),
            n_state: s.cloud.state_dim(),
            n_param: s.cloud.param_dim(),
            particles: bits(s.cloud.particles().as_slice()),
            log_weights: bits(s.cloud.log_weights()),
            kernel_h: s.kernel.h.to_bits(),
            kernel_theta_hat: bits(&s.kernel.theta_hat),
            kernel_v_theta: bits(&s.kernel.v_theta),
            gap_len: s.gap_len,
            t: s.t,
            rng: s.rng.clone(),
            frozen_params: s.frozen_params.as_deref().map(bits),
            theta_history: s.theta_history.iter().map(|v| bits(v)).collect(),
        }
    }

    fn restore(self) -> Result<(FilterConfig, FilterState)> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        let d = self.n_state + self.n_param;
        let n = self.log_weights.len();
        if d == 0 || self.particles.len() != d * n {
            return Err(Error::Checkpoint("particle array has the wrong size".into()));
        }
        let cloud = ParticleCloud::from_parts(
            self.n_state,
            self.n_param,
            DMatrix::from_vec(d, n, floats(&self.particles)),
            floats(&self.log_weights),
        )
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let kernel = KernelState {
            h: f64::from_bits(self.kernel_h),
            theta_hat: floats(&self.kernel_theta_hat),
            v_theta: floats(&self.kernel_v_theta),
        };
        Ok((
            self.config,
            FilterState {
                cloud,
                kernel,
                gap_len: self.gap_len,
                t: self.t,
                rng: self.rng,
                frozen_params: self.frozen_params.as_deref().map(floats),
                theta_history: self.theta_history.iter().map(|v| floats(v)).collect(),
            },
        ))
    }
}
