//! Kernel shrinkage of parameter particles.
//!
//! Before the parameter random walk, each particle is pulled toward the
//! cloud mean by `sqrt(1 - h^2)`, and the walk covariance is set to
//! `h^2 V`. The resulting Gaussian mixture has exactly the mean and
//! covariance of the unsmoothed cloud, which removes the variance inflation
//! of a plain random walk. Everything here works in working coordinates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cloud::{weighted_moments_of, MomentSummary};
use crate::error::{Error, Result};

/// Kernel parameter together with the shrinkage inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelState {
    pub h: f64,
    pub theta_hat: Vec<f64>,
    /// Row-major `r x r` parameter covariance.
    pub v_theta: Vec<f64>,
}

impl KernelState {
    pub fn new(h: f64, theta_hat: DVector<f64>, v_theta: &DMatrix<f64>) -> Result<Self> {
        check_h(h)?;
        let r = theta_hat.len();
        if v_theta.nrows() != r || v_theta.ncols() != r {
            return Err(Error::Contract("kernel covariance does not match mean".into()));
        }
        Ok(Self {
            h,
            theta_hat: theta_hat.as_slice().to_vec(),
            v_theta: v_theta.transpose().as_slice().to_vec(),
        })
    }

    pub fn dim(&self) -> usize {
        self.theta_hat.len()
    }

    pub fn theta_hat(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.theta_hat)
    }

    pub fn v_theta(&self) -> DMatrix<f64> {
        let r = self.dim();
        DMatrix::from_row_slice(r, r, &self.v_theta)
    }

    /// `h^2 V`.
    pub fn sigma_theta(&self) -> DMatrix<f64> {
        kernel_covariance(&self.v_theta(), self.h)
    }

    pub fn set_moments(&mut self, m: &MomentSummary) {
        self.theta_hat = m.mean.as_slice().to_vec();
        self.v_theta = m.covariance.transpose().as_slice().to_vec();
    }
}

pub fn check_h(h: f64) -> Result<()> {
    if (0.0..=1.0).contains(&h) {
        Ok(())
    } else {
        Err(Error::Contract(format!("kernel parameter h = {h} is outside [0, 1]")))
    }
}

/// `sqrt(1 - h^2)`.
#[inline]
pub fn shrink_factor(h: f64) -> f64 {
    (1.0 - h * h).max(0.0).sqrt()
}

/// `a * theta_i + (1 - a) * theta_hat` for every column, `a = sqrt(1 - h^2)`.
pub fn shrink_locations(
    thetas: &DMatrix<f64>,
    theta_hat: &DVector<f64>,
    h: f64,
) -> Result<DMatrix<f64>> {
    check_h(h)?;
    if thetas.nrows() != theta_hat.len() {
        return Err(Error::Contract("parameter mean has the wrong length".into()));
    }
    let a = shrink_factor(h);
    let mut out = thetas.clone();
    for mut col in out.column_iter_mut() {
        for (v, m) in col.iter_mut().zip(theta_hat.iter()) {
            *v = a * *v + (1.0 - a) * m;
        }
    }
    Ok(out)
}

/// `h^2 V`.
pub fn kernel_covariance(v_theta: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
    v_theta * (h * h)
}

/// Mean and covariance of the Gaussian mixture
/// `sum_i W^i N(theta_tilde^i, sigma)`: the weighted moments of the centres
/// plus the common kernel covariance.
pub fn smoothed_mixture_moments(
    weights: &[f64],
    shrunk: &DMatrix<f64>,
    sigma_theta: &DMatrix<f64>,
) -> MomentSummary {
    let mut m = weighted_moments_of(shrunk, weights);
    m.covariance += sigma_theta;
    m
}
