//! Concrete models and the ground-truth simulator.

mod example1;
mod example2;
mod linear;
mod simulate;

pub use example1::{Example1, Example1Config};
pub use example2::{Example2, Example2Config};
pub use linear::{kalman_filter, KalmanStep, LinearGaussian};
pub use simulate::{simulate_truth, Dataset};

/// Natural-unit parameters a model uses: either the filter's particle values
/// or a fixed vector when the parameter block is empty.
#[inline]
pub(crate) fn effective<'a>(known: &'a Option<Vec<f64>>, theta: &'a [f64]) -> &'a [f64] {
    match known {
        Some(k) => k,
        None => theta,
    }
}
