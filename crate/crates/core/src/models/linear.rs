use crate::model::{normal_logpdf, Measurement, ParamTransform, SystemModel};

/// Scalar linear-Gaussian model with known coefficients:
/// `x' = a x + v`, `v ~ N(0, q)`; `y = c x + w`, `w ~ N(0, r)`.
///
/// Its exact filter is [`kalman_filter`], which makes it the reference for
/// checking the particle filter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearGaussian {
    pub a: f64,
    pub c: f64,
    pub q: f64,
    pub r: f64,
}

impl SystemModel for LinearGaussian {
    fn state_dim(&self) -> usize {
        1
    }

    fn param_dim(&self) -> usize {
        0
    }

    fn measurement_dim(&self) -> usize {
        1
    }

    fn param_names(&self) -> Vec<String> {
        Vec::new()
    }

    fn transforms(&self) -> Vec<ParamTransform> {
        Vec::new()
    }

    fn transition(&self, _t: usize, x: &[f64], _u: Option<&[f64]>, _theta: &[f64], noise: &[f64], next: &mut [f64]) {
        next[0] = self.a * x[0] + self.q.sqrt() * noise[0];
    }

    fn measurement_loglik(&self, x: &[f64], _u: Option<&[f64]>, _theta: &[f64], y: &[f64]) -> f64 {
        normal_logpdf(y[0], self.c * x[0], self.r)
    }

    fn measurement(&self, x: &[f64], _u: Option<&[f64]>, _theta: &[f64], noise: &[f64], y: &mut [f64]) {
        y[0] = self.c * x[0] + self.r.sqrt() * noise[0];
    }

    fn measurement_noise_trace(&self, _theta: &[f64]) -> f64 {
        self.r
    }
}

/// Exact posterior (or, for a missing measurement, predictive) moments.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KalmanStep {
    pub t: usize,
    pub mean: f64,
    pub var: f64,
    pub predicted: bool,
}

/// Kalman filter from `x_0 ~ N(m0, p0)`; missing measurements only predict.
pub fn kalman_filter(model: &LinearGaussian, m0: f64, p0: f64, data: &[Measurement]) -> Vec<KalmanStep> {
    let (mut m, mut p) = (m0, p0);
    data.iter()
        .map(|meas| {
            m *= model.a;
            p = model.a * model.a * p + model.q;
            if let Some(y) = &meas.y {
                let s = model.c * model.c * p + model.r;
                let k = p * model.c / s;
                m += k * (y[0] - model.c * m);
                p *= 1.0 - k * model.c;
            }
            KalmanStep {
                t: meas.t,
                mean: m,
                var: p,
                predicted: meas.y.is_none(),
            }
        })
        .collect()
}
