use serde::{Deserialize, Serialize};

use super::effective;
use crate::error::{Error, Result};
use crate::model::{normal_logpdf, ParamTransform, PriorSpec, SystemModel};

const NAMES: [&str; 6] = ["alpha", "beta", "kappa", "gamma", "Q", "R"];

/// Autonomous growth model with a quadratic measurement:
///
/// ```text
/// x' = x / alpha + beta x / (1 + x^2) + kappa cos(1.2 t) + v,   v ~ N(0, Q)
/// y  = gamma x^2 + w,                                          w ~ N(0, R)
/// ```
///
/// with `theta = [alpha, beta, kappa, gamma, Q, R]`. `t` is the index of the
/// state being propagated.
#[derive(Clone, Debug, Default)]
pub struct Example2 {
    known: Option<Vec<f64>>,
    log_alpha: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Example2Config {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
    pub gamma: f64,
    /// Process-to-measurement noise ratio; selects `(Q, R)` when they are
    /// not given: 1 -> (0.1, 0.1), 0.1 -> (0.1, 1), 10 -> (1, 0.1).
    pub gamma_ratio: f64,
    pub q: Option<f64>,
    pub r: Option<f64>,
    pub x0: f64,
    pub x0_var: f64,
    pub prior_mean: Vec<f64>,
    pub prior_var: Vec<f64>,
    /// Estimate `alpha` on the log scale (keeps it positive).
    pub log_alpha: bool,
}

impl Default for Example2Config {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 25.0,
            kappa: 8.0,
            gamma: 0.05,
            gamma_ratio: 1.0,
            q: None,
            r: None,
            x0: 5.0,
            x0_var: 1.0,
            prior_mean: vec![1.0, 20.0, 10.0, 1.0, 0.5, 0.5],
            prior_var: vec![1.0, 15.0, 5.0, 1.0, 1.0, 1.0],
            log_alpha: false,
        }
    }
}

impl Example2Config {
    pub fn noise_variances(&self) -> Result<(f64, f64)> {
        let (q0, r0) = match self.gamma_ratio {
            g if g == 1.0 => (0.1, 0.1),
            g if g == 0.1 => (0.1, 1.0),
            g if g == 10.0 => (1.0, 0.1),
            g if self.q.is_some() && self.r.is_some() => (g, g),
            g => {
                return Err(Error::Config(format!(
                    "gamma_ratio {g} has no preset; give q and r explicitly"
                )))
            }
        };
        Ok((self.q.unwrap_or(q0), self.r.unwrap_or(r0)))
    }

    pub fn theta_star(&self) -> Result<Vec<f64>> {
        let (q, r) = self.noise_variances()?;
        Ok(vec![self.alpha, self.beta, self.kappa, self.gamma, q, r])
    }

    pub fn validate(&self) -> Result<()> {
        let th = self.theta_star()?;
        if self.alpha == 0.0 || !self.alpha.is_finite() {
            return Err(Error::Config("example2 needs a finite, non-zero alpha".into()));
        }
        if !(th[4] > 0.0 && th[5] > 0.0) {
            return Err(Error::Config("example2 needs Q > 0 and R > 0".into()));
        }
        if self.prior_mean.len() != 6 || self.prior_var.len() != 6 {
            return Err(Error::Config("example2 prior vectors need 6 entries".into()));
        }
        if self.log_alpha && self.alpha < 0.0 {
            return Err(Error::Config("log_alpha requires a positive alpha".into()));
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

    pub fn model(&self) -> Result<Example2> {
        self.validate()?;
        Ok(Example2 {
            known: None,
            log_alpha: self.log_alpha,
        })
    }
}

impl Example2 {
    pub fn new(log_alpha: bool) -> Self {
        Self {
            known: None,
            log_alpha,
        }
    }

    pub fn with_known(theta: Vec<f64>) -> Result<Self> {
        if theta.len() != 6 || theta[0] == 0.0 || !(theta[4] > 0.0 && theta[5] > 0.0) {
            return Err(Error::Config(
                "example2 needs [alpha != 0, beta, kappa, gamma, Q > 0, R > 0]".into(),
            ));
        }
        Ok(Self {
            known: Some(theta),
            log_alpha: false,
        })
    }
}

impl SystemModel for Example2 {
    fn state_dim(&self) -> usize {
        1
    }

    fn param_dim(&self) -> usize {
        if self.known.is_some() {
            0
        } else {
            6
        }
    }

    fn measurement_dim(&self) -> usize {
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
        let a = if self.log_alpha { Log } else { Identity };
        vec![a, Identity, Identity, Identity, Log, Log]
    }

    fn transition(&self, t: usize, x: &[f64], _u: Option<&[f64]>, theta: &[f64], noise: &[f64], next: &mut [f64]) {
        let th = effective(&self.known, theta);
        let x = x[0];
        next[0] = x / th[0]
            + th[1] * x / (1.0 + x * x)
            + th[2] * (1.2 * t as f64).cos()
            + th[4].sqrt() * noise[0];
    }

    fn measurement_loglik(&self, x: &[f64], _u: Option<&[f64]>, theta: &[f64], y: &[f64]) -> f64 {
        let th = effective(&self.known, theta);
        normal_logpdf(y[0], th[3] * x[0] * x[0], th[5])
    }

    fn measurement(&self, x: &[f64], _u: Option<&[f64]>, theta: &[f64], noise: &[f64], y: &mut [f64]) {
        let th = effective(&self.known, theta);
        y[0] = th[3] * x[0] * x[0] + th[5].sqrt() * noise[0];
    }

    fn measurement_noise_trace(&self, theta: &[f64]) -> f64 {
        effective(&self.known, theta)[5]
    }
}
