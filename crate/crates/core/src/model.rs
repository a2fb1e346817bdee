//! The extended state-space model abstraction.
//!
//! A model describes states `x` (dimension `n`) driven by a transition
//! `x' = f(t, x, u, theta, v)` and observed through `y ~ p(y | x, u, theta)`.
//! Unknown static parameters `theta` (dimension `r`) are carried next to the
//! state and move by a Gaussian random walk inside the filter.
//!
//! Parameters that must stay positive (noise variances) are declared with a
//! [`ParamTransform::Log`]. The filter stores, shrinks and walks parameters in
//! *working* coordinates (the transformed, unconstrained values) and hands
//! *natural* values to the model.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{is_psd, jittered_cholesky, lower_mul};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Coordinate map between natural and working parameter space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamTransform {
    Identity,
    /// Working value is `ln(theta)`; natural values are strictly positive.
    Log,
}

impl ParamTransform {
    #[inline]
    pub fn to_working(self, natural: f64) -> f64 {
        match self {
            ParamTransform::Identity => natural,
            ParamTransform::Log => natural.ln(),
        }
    }

    #[inline]
    pub fn to_natural(self, working: f64) -> f64 {
        match self {
            ParamTransform::Identity => working,
            ParamTransform::Log => working.exp(),
        }
    }

    /// Whether `natural` lies in the transform's domain.
    pub fn admits(self, natural: f64) -> bool {
        match self {
            ParamTransform::Identity => natural.is_finite(),
            ParamTransform::Log => natural.is_finite() && natural > 0.0,
        }
    }
}

pub fn to_natural_into(transforms: &[ParamTransform], working: &[f64], out: &mut [f64]) {
    for ((o, &w), tr) in out.iter_mut().zip(working).zip(transforms) {
        *o = tr.to_natural(w);
    }
}

pub fn to_working(transforms: &[ParamTransform], natural: &[f64]) -> Vec<f64> {
    natural
        .iter()
        .zip(transforms)
        .map(|(&v, tr)| tr.to_working(v))
        .collect()
}

/// One draw of the extended state `Z = (x, theta)`, in natural units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtendedState {
    pub x: Vec<f64>,
    pub theta: Vec<f64>,
}

impl ExtendedState {
    pub fn new(x: Vec<f64>, theta: Vec<f64>) -> Self {
        Self { x, theta }
    }

    pub fn dim(&self) -> usize {
        self.x.len() + self.theta.len()
    }
}

/// A sampling instant. `y == None` declares the measurement missing.
///
/// `u` is the known exogenous input that drives the transition *into* time
/// `t`, i.e. the input applied at `t - 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub t: usize,
    pub y: Option<Vec<f64>>,
    pub u: Option<Vec<f64>>,
}

impl Measurement {
    pub fn observed(t: usize, y: Vec<f64>, u: Option<Vec<f64>>) -> Self {
        Self { t, y: Some(y), u }
    }

    pub fn missing(t: usize, u: Option<Vec<f64>>) -> Self {
        Self { t, y: None, u }
    }

    pub fn is_missing(&self) -> bool {
        self.y.is_none()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Gaussian,
}

/// A fully specified noise distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    chol: DMatrix<f64>,
}

impl NoiseSpec {
    pub fn gaussian(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        if covariance.nrows() != mean.len() || !covariance.is_square() {
            return Err(Error::Config(format!(
                "noise covariance is {}x{} but mean has length {}",
                covariance.nrows(),
                covariance.ncols(),
                mean.len()
            )));
        }
        if !is_psd(&covariance, 1e-12) {
            return Err(Error::Config(
                "noise covariance must be symmetric positive semi-definite".into(),
            ));
        }
        let chol = jittered_cholesky(&covariance);
        Ok(Self {
            kind: NoiseKind::Gaussian,
            mean,
            covariance,
            chol,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Maps standard-normal draws to a draw of this noise.
    pub fn from_standard(&self, z: &[f64], out: &mut [f64]) {
        lower_mul(&self.chol, z, out);
        for (o, m) in out.iter_mut().zip(self.mean.iter()) {
            *o += m;
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        let mut out = vec![0.0; self.dim()];
        self.from_standard(&z, &mut out);
        DVector::from_vec(out)
    }
}

/// Gaussian log-density of a scalar.
#[inline]
pub fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    if var <= 0.0 {
        return if x == mean {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        };
    }
    let r = x - mean;
    -0.5 * (LN_2PI + var.ln() + r * r / var)
}

/// Independent Gaussian priors on the initial state and the parameters,
/// given by their natural-space first two moments.
///
/// Entries with a [`ParamTransform::Log`] are drawn from the log-normal with
/// the same natural mean and variance, so they must be uncorrelated with the
/// other parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub state_mean: Vec<f64>,
    pub state_cov: Vec<Vec<f64>>,
    pub param_mean: Vec<f64>,
    pub param_cov: Vec<Vec<f64>>,
}

impl PriorSpec {
    /// Independent entries with the given variances.
    pub fn diagonal(
        state_mean: Vec<f64>,
        state_var: Vec<f64>,
        param_mean: Vec<f64>,
        param_var: Vec<f64>,
    ) -> Self {
        Self {
            state_mean,
            state_cov: diag_rows(&state_var),
            param_mean,
            param_cov: diag_rows(&param_var),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_mean.len()
    }

    pub fn param_dim(&self) -> usize {
        self.param_mean.len()
    }

    /// Validates against model dimensions and prepares Cholesky factors.
    pub fn sampler(&self, transforms: &[ParamTransform]) -> Result<PriorSampler> {
        let n = self.state_dim();
        let r = self.param_dim();
        if transforms.len() != r {
            return Err(Error::Config(format!(
                "prior has {r} parameters but the model declares {}",
                transforms.len()
            )));
        }
        let state_cov = rows_to_matrix(&self.state_cov, n, "state covariance")?;
        let param_cov = rows_to_matrix(&self.param_cov, r, "parameter covariance")?;
        if !is_psd(&state_cov, 1e-12) {
            return Err(Error::Config("state prior covariance is not PSD".into()));
        }
        if !is_psd(&param_cov, 1e-12) {
            return Err(Error::Config(
                "parameter prior covariance is not PSD".into(),
            ));
        }

        let mut w_mean = self.param_mean.clone();
        let mut w_cov = param_cov.clone();
        for (j, tr) in transforms.iter().enumerate() {
            if *tr == ParamTransform::Log {
                let m = self.param_mean[j];
                let v = param_cov[(j, j)];
                if !(m > 0.0) {
                    return Err(Error::Config(format!(
                        "parameter {j} is log-transformed and needs a positive prior mean, got {m}"
                    )));
                }
                if (0..r).any(|k| k != j && param_cov[(j, k)] != 0.0) {
                    return Err(Error::Config(format!(
                        "log-transformed parameter {j} must be uncorrelated in the prior"
                    )));
                }
                let s2 = (1.0 + v / (m * m)).ln();
                w_mean[j] = m.ln() - 0.5 * s2;
                w_cov[(j, j)] = s2;
            }
        }
        Ok(PriorSampler {
            state_mean: self.state_mean.clone(),
            state_chol: jittered_cholesky(&state_cov),
            param_mean: w_mean,
            param_chol: jittered_cholesky(&w_cov),
            transforms: transforms.to_vec(),
        })
    }
}

/// A validated prior ready to draw particles.
#[derive(Clone, Debug)]
pub struct PriorSampler {
    state_mean: Vec<f64>,
    state_chol: DMatrix<f64>,
    /// Mean of the parameters in working coordinates.
    param_mean: Vec<f64>,
    param_chol: DMatrix<f64>,
    transforms: Vec<ParamTransform>,
}

impl PriorSampler {
    /// One draw as `[x, theta_working]`.
    pub fn draw_working<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let n = self.state_mean.len();
        let r = self.param_mean.len();
        let z: Vec<f64> = (0..n + r).map(|_| rng.sample(StandardNormal)).collect();
        lower_mul(&self.state_chol, &z[..n], &mut out[..n]);
        lower_mul(&self.param_chol, &z[n..], &mut out[n..n + r]);
        for (o, m) in out[..n].iter_mut().zip(&self.state_mean) {
            *o += m;
        }
        for (o, m) in out[n..n + r].iter_mut().zip(&self.param_mean) {
            *o += m;
        }
    }

    pub fn transforms(&self) -> &[ParamTransform] {
        &self.transforms
    }
}

/// Draws one extended state from the prior, in natural units.
pub fn sample_prior<R: Rng + ?Sized>(
    prior: &PriorSpec,
    transforms: &[ParamTransform],
    rng: &mut R,
) -> Result<ExtendedState> {
    let sampler = prior.sampler(transforms)?;
    let n = prior.state_dim();
    let mut buf = vec![0.0; n + prior.param_dim()];
    sampler.draw_working(rng, &mut buf);
    let theta = buf[n..]
        .iter()
        .zip(transforms)
        .map(|(&w, tr)| tr.to_natural(w))
        .collect();
    Ok(ExtendedState::new(buf[..n].to_vec(), theta))
}

fn diag_rows(values: &[f64]) -> Vec<Vec<f64>> {
    (0..values.len())
        .map(|i| {
            let mut row = vec![0.0; values.len()];
            row[i] = values[i];
            row
        })
        .collect()
}

fn rows_to_matrix(rows: &[Vec<f64>], dim: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Config(format!("{what} must be {dim}x{dim}")));
    }
    Ok(DMatrix::from_fn(dim, dim, |i, j| rows[i][j]))
}

/// Behavioral interface of a state-space model.
///
/// Implementations must be pure: given the same inputs and noise draws they
/// return the same outputs, so the filter can evaluate particles from many
/// threads. `theta` is always in natural units and has length
/// [`param_dim`](Self::param_dim); a model whose parameters are all known
/// reports `param_dim() == 0` and ignores the slice.
pub trait SystemModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    fn measurement_dim(&self) -> usize;

    /// Standard-normal draws consumed by one [`transition`](Self::transition).
    fn process_noise_dim(&self) -> usize {
        self.state_dim()
    }

    fn input_dim(&self) -> usize {
        0
    }

    fn param_names(&self) -> Vec<String>;

    fn transforms(&self) -> Vec<ParamTransform>;

    /// Writes `x_{t+1}` given `x_t`, the input applied at `t`, the
    /// parameters, and `process_noise_dim()` standard-normal draws.
    fn transition(
        &self,
        t: usize,
        x: &[f64],
        u: Option<&[f64]>,
        theta: &[f64],
        noise: &[f64],
        next: &mut [f64],
    );

    /// `ln p(y | x, u, theta)`; finite or `-inf`, never NaN for finite input.
    fn measurement_loglik(&self, x: &[f64], u: Option<&[f64]>, theta: &[f64], y: &[f64]) -> f64;

    /// Draws a measurement from `measurement_dim()` standard-normal draws.
    fn measurement(
        &self,
        x: &[f64],
        u: Option<&[f64]>,
        theta: &[f64],
        noise: &[f64],
        y: &mut [f64],
    );

    /// Trace of the measurement-noise covariance at `theta`.
    fn measurement_noise_trace(&self, theta: &[f64]) -> f64;

    /// Draws the exogenous input applied at time `t` when simulating.
    fn sample_input(&self, _t: usize, _rng: &mut dyn rand::RngCore) -> Option<Vec<f64>> {
        None
    }
}

/// Samples `x_{t+1} ~ p(x_{t+1} | z)` with fresh process noise.
pub fn transition_sample<R: Rng + ?Sized>(
    model: &dyn SystemModel,
    t: usize,
    z: &ExtendedState,
    u: Option<&[f64]>,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_dims(model, z)?;
    let noise: Vec<f64> = (0..model.process_noise_dim())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let mut next = vec![0.0; model.state_dim()];
    model.transition(t, &z.x, u, &z.theta, &noise, &mut next);
    if let Some(bad) = next.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            index: bad,
            what: "state transition overflowed".into(),
        });
    }
    Ok(next)
}

/// Samples `theta' = theta_shrunk + xi`, `xi ~ N(0, sigma)` in working
/// coordinates, and returns natural values.
pub fn parameter_walk_sample<R: Rng + ?Sized>(
    theta_shrunk: &[f64],
    sigma: &DMatrix<f64>,
    transforms: &[ParamTransform],
    rng: &mut R,
) -> Vec<f64> {
    let r = theta_shrunk.len();
    let l = jittered_cholesky(sigma);
    let z: Vec<f64> = (0..r).map(|_| rng.sample(StandardNormal)).collect();
    let mut step = vec![0.0; r];
    lower_mul(&l, &z, &mut step);
    theta_shrunk
        .iter()
        .zip(transforms)
        .zip(&step)
        .map(|((&th, tr), s)| tr.to_natural(tr.to_working(th) + s))
        .collect()
}

/// `ln p(y | z)` with dimension checks; NaN is reported as `-inf`.
pub fn measurement_loglik(
    model: &dyn SystemModel,
    z: &ExtendedState,
    u: Option<&[f64]>,
    y: &[f64],
) -> Result<f64> {
    check_dims(model, z)?;
    if y.len() != model.measurement_dim() {
        return Err(Error::Config(format!(
            "measurement has length {} but the model expects {}",
            y.len(),
            model.measurement_dim()
        )));
    }
    let ll = model.measurement_loglik(&z.x, u, &z.theta, y);
    Ok(if ll.is_nan() { f64::NEG_INFINITY } else { ll })
}

fn check_dims(model: &dyn SystemModel, z: &ExtendedState) -> Result<()> {
    if z.x.len() != model.state_dim() || z.theta.len() != model.param_dim() {
        return Err(Error::Config(format!(
            "extended state has dims ({}, {}) but the model declares ({}, {})",
            z.x.len(),
            z.theta.len(),
            model.state_dim(),
            model.param_dim()
        )));
    }
    Ok(())
}
