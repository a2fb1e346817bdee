//! The weighted particle cloud and the core SMC primitives on it.
//!
//! Particles are stored column-wise in a `dim x N` matrix, state entries
//! first and parameter entries (in working coordinates) after. Weights are
//! kept as log-weights; every reduction runs sequentially in particle order
//! so results do not depend on how per-particle work was scheduled.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, symmetrize};
use crate::model::{ExtendedState, ParamTransform};

/// Tolerance on `sum(exp(log_weights)) - 1` for a cloud to count as
/// normalized.
pub const NORMALIZATION_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    State,
    Parameter,
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentSummary {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl MomentSummary {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimateKind {
    Filtered,
    Predicted,
}

impl EstimateKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimateKind::Filtered => "filtered",
            EstimateKind::Predicted => "predicted",
        }
    }
}

/// MMSE estimates of the state and (natural-unit) parameter blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct PointEstimate {
    pub kind: EstimateKind,
    pub x_mean: DVector<f64>,
    pub x_cov: DMatrix<f64>,
    pub theta_mean: DVector<f64>,
    pub theta_cov: DMatrix<f64>,
}

/// Weighted mean and covariance of the columns of `data`.
///
/// `weights` are taken as given (no normalization is applied).
pub fn weighted_moments_of(data: &DMatrix<f64>, weights: &[f64]) -> MomentSummary {
    let d = data.nrows();
    let mut mean = DVector::zeros(d);
    for (i, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for k in 0..d {
            mean[k] += w * data[(k, i)];
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    let mut dev = vec![0.0; d];
    for (i, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for k in 0..d {
            dev[k] = data[(k, i)] - mean[k];
        }
        for a in 0..d {
            let wa = w * dev[a];
            for b in a..d {
                cov[(a, b)] += wa * dev[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            cov[(a, b)] = cov[(b, a)];
        }
    }
    symmetrize(&mut cov);
    MomentSummary {
        mean,
        covariance: cov,
    }
}

/// `N` weighted extended-state samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleCloud {
    n_state: usize,
    n_param: usize,
    particles: DMatrix<f64>,
    log_weights: Vec<f64>,
    normalized: bool,
}

impl ParticleCloud {
    /// Builds a cloud from a `(n_state + n_param) x N` matrix. The
    /// normalized flag is set when the weights pass the normalization check.
    pub fn from_parts(
        n_state: usize,
        n_param: usize,
        particles: DMatrix<f64>,
        log_weights: Vec<f64>,
    ) -> Result<Self> {
        if particles.nrows() != n_state + n_param {
            return Err(Error::Contract(format!(
                "particle matrix has {} rows, expected {}",
                particles.nrows(),
                n_state + n_param
            )));
        }
        if particles.ncols() != log_weights.len() || log_weights.is_empty() {
            return Err(Error::Contract(format!(
                "{} particles but {} weights",
                particles.ncols(),
                log_weights.len()
            )));
        }
        if log_weights.iter().any(|w| w.is_nan()) {
            return Err(Error::Contract("NaN log-weight".into()));
        }
        let normalized = weights_sum_to_one(&log_weights);
        Ok(Self {
            n_state,
            n_param,
            particles,
            log_weights,
            normalized,
        })
    }

    /// Equal weights `1/N`.
    pub fn uniform(n_state: usize, n_param: usize, particles: DMatrix<f64>) -> Result<Self> {
        let n = particles.ncols();
        let lw = vec![-(n as f64).ln(); n];
        let mut cloud = Self::from_parts(n_state, n_param, particles, lw)?;
        cloud.normalized = true;
        Ok(cloud)
    }

    /// Builds a cloud from natural-unit states and linear weights.
    pub fn from_states(
        states: &[ExtendedState],
        weights: &[f64],
        transforms: &[ParamTransform],
    ) -> Result<Self> {
        let first = states
            .first()
            .ok_or_else(|| Error::Contract("empty particle set".into()))?;
        let (n, r) = (first.x.len(), first.theta.len());
        if transforms.len() != r {
            return Err(Error::Contract("transform count does not match parameters".into()));
        }
        let mut m = DMatrix::zeros(n + r, states.len());
        for (i, s) in states.iter().enumerate() {
            if s.x.len() != n || s.theta.len() != r {
                return Err(Error::Contract("ragged particle set".into()));
            }
            for k in 0..n {
                m[(k, i)] = s.x[k];
            }
            for k in 0..r {
                m[(n + k, i)] = transforms[k].to_working(s.theta[k]);
            }
        }
        let lw = weights.iter().map(|w| w.ln()).collect();
        Self::from_parts(n, r, m, lw)
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.n_state
    }

    pub fn param_dim(&self) -> usize {
        self.n_param
    }

    pub fn dim(&self) -> usize {
        self.n_state + self.n_param
    }

    pub fn particles(&self) -> &DMatrix<f64> {
        &self.particles
    }

    pub fn particles_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.particles
    }

    /// `[x, theta_working]` of particle `i`.
    pub fn particle(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.particles.as_slice()[i * d..(i + 1) * d]
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.particle(i)[..self.n_state]
    }

    /// Parameter entries of particle `i` in working coordinates.
    pub fn params(&self, i: usize) -> &[f64] {
        &self.particle(i)[self.n_state..]
    }

    pub fn natural_params(&self, i: usize, transforms: &[ParamTransform]) -> Vec<f64> {
        self.params(i)
            .iter()
            .zip(transforms)
            .map(|(&w, tr)| tr.to_natural(w))
            .collect()
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Normalizes in place and returns the log of the previous total weight.
    pub fn normalize(&mut self) -> Result<f64> {
        let lse = log_sum_exp(&self.log_weights);
        if lse == f64::NEG_INFINITY {
            return Err(Error::AllWeightsZero);
        }
        if !lse.is_finite() {
            return Err(Error::Contract("log-weights overflow".into()));
        }
        for w in &mut self.log_weights {
            *w -= lse;
        }
        self.normalized = true;
        Ok(lse)
    }

    pub fn set_uniform_weights(&mut self) {
        let lw = -(self.len() as f64).ln();
        self.log_weights.iter_mut().for_each(|w| *w = lw);
        self.normalized = true;
    }

    fn require_normalized(&self, op: &str) -> Result<()> {
        if self.normalized {
            Ok(())
        } else {
            Err(Error::Contract(format!("{op} requires a normalized cloud")))
        }
    }

    fn block_range(&self, block: Block) -> std::ops::Range<usize> {
        match block {
            Block::State => 0..self.n_state,
            Block::Parameter => self.n_state..self.dim(),
            Block::Full => 0..self.dim(),
        }
    }

    /// Weighted mean and covariance over one block (parameters in working
    /// coordinates).
    pub fn weighted_moments(&self, block: Block) -> Result<MomentSummary> {
        self.require_normalized("weighted_moments")?;
        let range = self.block_range(block);
        let data = self.particles.rows(range.start, range.len()).into_owned();
        Ok(weighted_moments_of(&data, &self.weights()))
    }

    /// Keeps only the block's coordinates; weights are unchanged.
    pub fn marginalize(&self, block: Block) -> ParticleCloud {
        let range = self.block_range(block);
        let (n_state, n_param) = match block {
            Block::State => (self.n_state, 0),
            Block::Parameter => (0, self.n_param),
            Block::Full => (self.n_state, self.n_param),
        };
        ParticleCloud {
            n_state,
            n_param,
            particles: self.particles.rows(range.start, range.len()).into_owned(),
            log_weights: self.log_weights.clone(),
            normalized: self.normalized,
        }
    }

    /// Bayes update: adds per-particle log-likelihoods to the log-weights and
    /// renormalizes. Returns the new cloud and the log normalizing constant
    /// `ln sum_i W^i p(y | Z^i)`.
    pub fn reweigh(&self, logliks: &[f64]) -> Result<(ParticleCloud, f64)> {
        self.require_normalized("reweigh")?;
        if logliks.len() != self.len() {
            return Err(Error::Contract(format!(
                "{} log-likelihoods for {} particles",
                logliks.len(),
                self.len()
            )));
        }
        let lw = posterior_log_weights(&self.log_weights, logliks)?;
        let out = ParticleCloud {
            n_state: self.n_state,
            n_param: self.n_param,
            particles: self.particles.clone(),
            log_weights: lw.weights,
            normalized: true,
        };
        Ok((out, lw.log_normalizer))
    }

    /// `1 / sum (W^i)^2`.
    pub fn effective_sample_size(&self) -> Result<f64> {
        self.require_normalized("effective_sample_size")?;
        Ok(ess_from_log_weights(&self.log_weights))
    }

    /// MMSE estimates with parameter moments reported in natural units.
    pub fn point_estimate(
        &self,
        kind: EstimateKind,
        transforms: &[ParamTransform],
    ) -> Result<PointEstimate> {
        self.require_normalized("point_estimate")?;
        let w = self.weights();
        let xs = self.particles.rows(0, self.n_state).into_owned();
        let x = weighted_moments_of(&xs, &w);
        let mut th = self.particles.rows(self.n_state, self.n_param).into_owned();
        for i in 0..th.ncols() {
            for k in 0..self.n_param {
                th[(k, i)] = transforms[k].to_natural(th[(k, i)]);
            }
        }
        let theta = weighted_moments_of(&th, &w);
        Ok(PointEstimate {
            kind,
            x_mean: x.mean,
            x_cov: x.covariance,
            theta_mean: theta.mean,
            theta_cov: theta.covariance,
        })
    }

    /// ESS of one parameter's marginal: weights are pooled into bins of
    /// `bin_width` natural units and the result is `1 / sum_b p_b^2`.
    ///
    /// Unlike the weight ESS this also sees duplicated particles, so it
    /// drops to 1 when resampling has collapsed the parameter onto a single
    /// value.
    pub fn parameter_marginal_ess(
        &self,
        index: usize,
        bin_width: f64,
        transforms: &[ParamTransform],
    ) -> Result<f64> {
        self.require_normalized("parameter_marginal_ess")?;
        if index >= self.n_param || !(bin_width > 0.0) {
            return Err(Error::Contract(format!(
                "bad marginal ESS request: parameter {index}, bin width {bin_width}"
            )));
        }
        let mut bins = std::collections::BTreeMap::<i64, f64>::new();
        for (i, &lw) in self.log_weights.iter().enumerate() {
            let w = lw.exp();
            if w == 0.0 {
                continue;
            }
            let v = transforms[index].to_natural(self.params(i)[index]);
            *bins.entry((v / bin_width).floor() as i64).or_insert(0.0) += w;
        }
        let s: f64 = bins.values().map(|p| p * p).sum();
        Ok(1.0 / s)
    }

    /// Replaces particle columns by `indices` and resets weights to `1/N`.
    pub(crate) fn select(&self, indices: &[usize]) -> ParticleCloud {
        let d = self.dim();
        let src = self.particles.as_slice();
        let mut data = Vec::with_capacity(d * indices.len());
        for &i in indices {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let n = indices.len();
        ParticleCloud {
            n_state: self.n_state,
            n_param: self.n_param,
            particles: DMatrix::from_vec(d, n, data),
            log_weights: vec![-(n as f64).ln(); n],
            normalized: true,
        }
    }
}

pub(crate) struct NormalizedLogWeights {
    pub weights: Vec<f64>,
    pub log_normalizer: f64,
}

/// `prior + loglik` normalized by log-sum-exp.
pub(crate) fn posterior_log_weights(
    prior: &[f64],
    logliks: &[f64],
) -> Result<NormalizedLogWeights> {
    let mut combined: Vec<f64> = prior
        .iter()
        .zip(logliks)
        .map(|(&p, &l)| {
            let v = p + l;
            if v.is_nan() {
                f64::NEG_INFINITY
            } else {
                v
            }
        })
        .collect();
    let lse = log_sum_exp(&combined);
    if lse == f64::NEG_INFINITY {
        return Err(Error::AllWeightsZero);
    }
    if !lse.is_finite() {
        return Err(Error::Contract("log-likelihood is +inf".into()));
    }
    for v in &mut combined {
        *v -= lse;
    }
    Ok(NormalizedLogWeights {
        weights: combined,
        log_normalizer: lse,
    })
}

pub(crate) fn ess_from_log_weights(log_weights: &[f64]) -> f64 {
    let s: f64 = log_weights.iter().map(|w| (2.0 * w).exp()).sum();
    1.0 / s
}

fn weights_sum_to_one(log_weights: &[f64]) -> bool {
    let s: f64 = log_weights.iter().map(|w| w.exp()).sum();
    (s - 1.0).abs() <= NORMALIZATION_TOL
}
