//! Joint on-line state and parameter estimation for nonlinear state-space
//! models with an adaptive sequential-importance-resampling particle filter.
//!
//! Static parameters are appended to the state and given Gaussian artificial
//! dynamics. The variance inflation this causes is removed by kernel
//! shrinkage of the parameter particles, and the kernel parameter `h` is
//! chosen at every measurement by minimizing a particle estimate of the
//! Kullback-Leibler divergence between the importance density and the
//! posterior. Missing measurements are handled on-line by multi-step
//! prediction.
//!
//! The crate is organized bottom-up:
//!
//! - [`model`]: the extended state-space model interface, priors and
//!   parameter transforms.
//! - [`cloud`]: the weighted particle cloud and its moment, weighting and
//!   estimation primitives.
//! - [`kernel`]: kernel shrinkage and kernel covariance.
//! - [`tuner`]: the divergence estimate and the search for `h`.
//! - [`resample`]: systematic, stratified and residual resampling.
//! - [`filter`]: the per-step state machine, including missing data.
//! - [`models`]: the two benchmark systems, a linear-Gaussian system with a
//!   Kalman reference, and a ground-truth simulator.
//! - [`harness`]: configuration, Monte Carlo runner and result files.

pub mod cloud;
pub mod error;
pub mod filter;
pub mod harness;
pub mod kernel;
pub mod linalg;
pub mod model;
pub mod models;
pub mod resample;
pub mod tuner;

pub use cloud::{Block, EstimateKind, MomentSummary, ParticleCloud, PointEstimate};
pub use error::{Error, Result};
pub use filter::{
    run_filter, EstimateRecord, Filter, FilterConfig, FilterState, FreezeRule,
};
pub use kernel::KernelState;
pub use model::{
    ExtendedState, Measurement, NoiseKind, NoiseSpec, ParamTransform, PriorSpec, SystemModel,
};
pub use resample::ResampleScheme;
pub use tuner::{TransitionParams, TunerMode, TuningConfig, TuningResult};

/// Seedable generator used for every random stream in the crate.
pub type SmcRng = rand_chacha::ChaCha8Rng;
