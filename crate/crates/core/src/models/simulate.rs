use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Measurement, SystemModel};

/// A simulated trajectory. `states[t]` is `x_t` for `t = 0..=T`;
/// `measurements[t - 1]` is the measurement at `t` together with the input
/// that drove the transition into `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub states: Vec<Vec<f64>>,
    pub measurements: Vec<Measurement>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }

    /// The measurement sequence with `y` removed at the given time indices.
    pub fn with_missing(&self, missing: &[usize]) -> Vec<Measurement> {
        let mut out = self.measurements.clone();
        for &t in missing {
            if let Some(m) = out.get_mut(t.wrapping_sub(1)) {
                m.y = None;
            }
        }
        out
    }
}

/// Forward-simulates the model at fixed natural parameters `theta`.
///
/// Each step draws, in order: the input, the process noise, the
/// measurement noise.
pub fn simulate_truth<R: Rng + ?Sized>(
    model: &dyn SystemModel,
    theta: &[f64],
    x0: &[f64],
    steps: usize,
    rng: &mut R,
) -> Result<Dataset> {
    if steps == 0 {
        return Err(Error::Config("simulation needs at least one step".into()));
    }
    if x0.len() != model.state_dim() {
        return Err(Error::Config("initial state has the wrong dimension".into()));
    }
    let q = model.process_noise_dim();
    let my = model.measurement_dim();
    let mut states = Vec::with_capacity(steps + 1);
    let mut measurements = Vec::with_capacity(steps);
    states.push(x0.to_vec());
    let mut noise = vec![0.0; q.max(my)];
    for t in 1..=steps {
        let u = model.sample_input(t - 1, &mut RngAdapter(rng));
        for v in noise[..q].iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let mut x = vec![0.0; model.state_dim()];
        model.transition(t - 1, &states[t - 1], u.as_deref(), theta, &noise[..q], &mut x);
        for v in noise[..my].iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let mut y = vec![0.0; my];
        model.measurement(&x, u.as_deref(), theta, &noise[..my], &mut y);
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                index: t,
                what: "simulated trajectory overflowed".into(),
            });
        }
        states.push(x);
        measurements.push(Measurement::observed(t, y, u));
    }
    Ok(Dataset {
        states,
        measurements,
    })
}

/// Lets a possibly unsized generator be passed as `&mut dyn RngCore`.
struct RngAdapter<'a, R: ?Sized>(&'a mut R);

impl<R: RngCore + ?Sized> RngCore for RngAdapter<'_, R> {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}
