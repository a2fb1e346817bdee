use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::effective;
use crate::error::{Error, Result};
use crate::model::{normal_logpdf, ParamTransform, PriorSpec, SystemModel};

const NAMES: [&str; 5] = ["alpha", "beta", "gamma", "Q", "R"];

/// Linear state with a cosine measurement and a known Gaussian input:
///
/// ```text
/// x' = alpha x + beta u + v,      v ~ N(0, Q)
/// y  = gamma cos(x) + w,          w ~ N(0, R)
/// ```
///
/// with `theta = [alpha, beta, gamma, Q, R]` and `u ~ N(0, 1)`.
#[derive(Clone, Debug, Default)]
pub struct Example1 {
    known: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Example1Config {
    pub theta_star: Vec<f64>,
    pub x0: f64,
    pub prior_mean: Vec<f64>,
    pub prior_var: Vec<f64>,
    /// Variance of the initial-state prior, centred on `x0`.
    pub x0_var: f64,
}

impl Default for Example1Config {
    fn default() -> Self {
        Self {
            theta_star: vec![0.9, 1.0, 1.0, 0.1, 0.1],
            x0: 1.0,
            prior_mean: vec![0.5, 0.5, 0.5, 0.2, 0.2],
            prior_var: vec![1.0, 1.0, 1.0, 0.05, 0.05],
            x0_var: 1.0,
        }
    }
}

impl Example1Config {
    pub fn validate(&self) -> Result<()> {
        if self.theta_star.len() != 5 || self.prior_mean.len() != 5 || self.prior_var.len() != 5 {
            return Err(Error::Config("example1 parameter vectors need 5 entries".into()));
        }
        if !(self.theta_star[3] > 0.0 && self.theta_star[4] > 0.0) {
            return Err(Error::Config("example1 needs Q > 0 and R > 0".into()));
        }
        if !(self.x0_var >= 0.0) {
            return Err(Error::Config("x0_var must be non-negative".into()));
        }
        Ok(())
    }

    pub fn prior(&self) -> PriorSpec {
        PriorSpec::diagonal(
            vec![self.x0],
            vec![self.x0_var],
            self.prior_mean.clone(),
            self.prior_var.clone(),
        )
    }
}

impl Example1 {
    /// All five parameters unknown.
    pub fn new() -> Self {
        Self { known: None }
    }

    /// Parameters fixed at `theta`; the parameter block is empty.
    pub fn with_known(theta: Vec<f64>) -> Result<Self> {
        if theta.len() != 5 || !(theta[3] > 0.0 && theta[4] > 0.0) {
            return Err(Error::Config("example1 needs [alpha, beta, gamma, Q > 0, R > 0]".into()));
        }
        Ok(Self { known: Some(theta) })
    }
}

impl SystemModel for Example1 {
    fn state_dim(&self) -> usize {
        1
    }

    fn param_dim(&self) -> usize {
        if self.known.is_some() {
            0
        } else {
            5
        }
    }

    fn measurement_dim(&self) -> usize {
        1
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn param_names(&self) -> Vec<String> {
        if self.known.is_some() {
            return Vec::new();
        }
        NAMES.iter().map(|s| s.to_string()).collect()
    }

    fn transforms(&self) -> Vec<ParamTransform> {
        if self.known.is_some() {
            return Vec::new();
        }
        use ParamTransform::*;
        vec![Identity, Identity, Identity, Log, Log]
    }

    fn transition(&self, _t: usize, x: &[f64], u: Option<&[f64]>, theta: &[f64], noise: &[f64], next: &mut [f64]) {
        let th = effective(&self.known, theta);
        let u = u.map_or(0.0, |u| u[0]);
        next[0] = th[0] * x[0] + th[1] * u + th[3].sqrt() * noise[0];
    }

    fn measurement_loglik(&self, x: &[f64], _u: Option<&[f64]>, theta: &[f64], y: &[f64]) -> f64 {
        let th = effective(&self.known, theta);
        normal_logpdf(y[0], th[2] * x[0].cos(), th[4])
    }

    fn measurement(&self, x: &[f64], _u: Option<&[f64]>, theta: &[f64], noise: &[f64], y: &mut [f64]) {
        let th = effective(&self.known, theta);
        y[0] = th[2] * x[0].cos() + th[4].sqrt() * noise[0];
    }

    fn measurement_noise_trace(&self, theta: &[f64]) -> f64 {
        effective(&self.known, theta)[4]
    }

    fn sample_input(&self, _t: usize, rng: &mut dyn RngCore) -> Option<Vec<f64>> {
        Some(vec![StandardNormal.sample(rng)])
    }
}
