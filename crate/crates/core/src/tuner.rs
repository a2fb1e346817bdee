//! Kernel-parameter tuning by minimum divergence between the importance
//! density and the posterior.
//!
//! For a candidate `h` the previous cloud is shrunk, propagated through the
//! state transition and the parameter random walk, and reweighted with the
//! new measurement. The particle estimate of `KL(ISF || posterior)` is
//!
//! ```text
//! D(h) = -sum_i Wpred^i * ln(Wpost^i / Wpred^i)
//! ```
//!
//! and `h*` is its minimizer over `[0, 1]`: a uniform grid followed by
//! golden-section refinement around the best grid point. With common random
//! numbers every candidate reuses the same standard-normal draws, so `D` is
//! a deterministic function of `h` within one call.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{posterior_log_weights, weighted_moments_of, ParticleCloud};
use crate::error::{Error, Result};
use crate::kernel::{check_h, shrink_factor, KernelState};
use crate::linalg::{jittered_cholesky, lower_mul};
use crate::model::{ParamTransform, SystemModel};

const CHUNK: usize = 256;

/// How `h` is chosen at each measurement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TunerMode {
    /// Minimize the divergence estimate.
    Kl,
    /// Use the same `h` at every step.
    Fixed(f64),
}

impl Default for TunerMode {
    fn default() -> Self {
        TunerMode::Kl
    }
}

impl fmt::Display for TunerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TunerMode::Kl => f.write_str("kl"),
            TunerMode::Fixed(h) => write!(f, "fixed:{h}"),
        }
    }
}

impl FromStr for TunerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "kl" {
            return Ok(TunerMode::Kl);
        }
        if let Some(v) = s.strip_prefix("fixed:") {
            let h: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad fixed kernel parameter '{v}'")))?;
            check_h(h).map_err(|_| Error::Config(format!("fixed h = {h} is outside [0, 1]")))?;
            return Ok(TunerMode::Fixed(h));
        }
        Err(Error::Config(format!(
            "unknown tuner mode '{s}' (expected 'kl' or 'fixed:<h>')"
        )))
    }
}

impl Serialize for TunerMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TunerMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Parameter values that drive the state transition of a proposed
/// particle.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransitionParams {
    /// The walked values `theta'`, so the new state and the new parameters
    /// stay coupled.
    #[default]
    Walked,
    /// The shrunk locations `theta~` before the walk.
    Shrunk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningConfig {
    pub mode: TunerMode,
    pub grid_points: usize,
    /// Golden-section steps after the grid; 0 disables refinement.
    pub refine_iters: usize,
    pub h_bounds: (f64, f64),
    pub common_random_numbers: bool,
    pub transition_params: TransitionParams,
}

impl Default for TuningConfig {
    fn default() -> Self {
        Self {
            mode: TunerMode::Kl,
            grid_points: 21,
            refine_iters: 20,
            h_bounds: (0.0, 1.0),
            common_random_numbers: true,
            transition_params: TransitionParams::Walked,
        }
    }
}

impl TuningConfig {
    pub fn fixed(h: f64) -> Self {
        Self {
            mode: TunerMode::Fixed(h),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.h_bounds;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "tuner bounds ({lo}, {hi}) must satisfy 0 <= lo <= hi <= 1"
            )));
        }
        if self.grid_points < 3 {
            return Err(Error::Config("tuner.grid_points must be at least 3".into()));
        }
        if let TunerMode::Fixed(h) = self.mode {
            check_h(h).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }
}

/// One evaluated candidate; `kl` is `None` when every weight vanished.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CandidateScore {
    pub h: f64,
    pub kl: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TuningResult {
    pub h_star: f64,
    pub kl_value: f64,
    /// The cloud at the new time with posterior weights.
    pub proposed_cloud: ParticleCloud,
    /// Log-weights before the measurement update.
    pub predicted_log_weights: Vec<f64>,
    /// Per-particle log-likelihoods of the winning candidate.
    pub logliks: Vec<f64>,
    /// Every candidate in evaluation order.
    pub evaluations: Vec<CandidateScore>,
}

impl TuningResult {
    pub fn predicted_weights(&self) -> Vec<f64> {
        self.predicted_log_weights.iter().map(|w| w.exp()).collect()
    }
}

/// Divergence estimate from normalized linear weights.
///
/// Pairs with zero predicted weight contribute nothing; a positive predicted
/// weight paired with a zero posterior weight makes the divergence infinite.
pub fn kl_hat(pred: &[f64], post: &[f64]) -> Result<f64> {
    if pred.len() != post.len() {
        return Err(Error::Contract(format!(
            "weight vectors have lengths {} and {}",
            pred.len(),
            post.len()
        )));
    }
    for (name, w) in [("predicted", pred), ("posterior", post)] {
        let s: f64 = w.iter().sum();
        if w.iter().any(|v| !(*v >= 0.0)) || (s - 1.0).abs() > 1e-8 {
            return Err(Error::Contract(format!("{name} weights are not normalized")));
        }
    }
    let lp: Vec<f64> = pred.iter().map(|w| w.ln()).collect();
    let lq: Vec<f64> = post.iter().map(|w| w.ln()).collect();
    Ok(kl_hat_log(&lp, &lq))
}

/// Divergence estimate from normalized log-weights. Never negative.
pub fn kl_hat_log(log_pred: &[f64], log_post: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&lp, &lq) in log_pred.iter().zip(log_post) {
        if lp == f64::NEG_INFINITY {
            continue;
        }
        if lq == f64::NEG_INFINITY {
            return f64::INFINITY;
        }
        acc += lp.exp() * (lq - lp);
    }
    (-acc).max(0.0)
}

/// Standard-normal draws for one propagation of the whole cloud.
#[derive(Clone, Debug)]
pub struct NoiseDraws {
    process: Vec<f64>,
    param: Vec<f64>,
    process_dim: usize,
    param_dim: usize,
}

impl NoiseDraws {
    /// Draws particle by particle: process noise, then parameter noise.
    pub fn draw<R: Rng + ?Sized>(n: usize, process_dim: usize, param_dim: usize, rng: &mut R) -> Self {
        let mut process = Vec::with_capacity(n * process_dim);
        let mut param = Vec::with_capacity(n * param_dim);
        for _ in 0..n {
            for _ in 0..process_dim {
                process.push(rng.sample(StandardNormal));
            }
            for _ in 0..param_dim {
                param.push(rng.sample(StandardNormal));
            }
        }
        Self {
            process,
            param,
            process_dim,
            param_dim,
        }
    }
}

/// Propagation of one cloud to the next time index for any `h`.
pub struct Propagator<'a> {
    model: &'a dyn SystemModel,
    transforms: Vec<ParamTransform>,
    cloud: &'a ParticleCloud,
    theta_hat: DVector<f64>,
    chol_v: DMatrix<f64>,
    /// Time index handed to the transition (the step being left).
    t_from: usize,
    u: Option<&'a [f64]>,
    transition_params: TransitionParams,
}

/// Particles at the new time plus per-particle log-likelihoods.
pub struct Proposal {
    pub particles: DMatrix<f64>,
    pub logliks: Vec<f64>,
    /// Particles whose propagated state was not finite.
    pub non_finite: usize,
}

impl<'a> Propagator<'a> {
    /// `kernel` supplies the shrinkage target and the covariance `V`; its
    /// `h` is ignored.
    pub fn new(
        model: &'a dyn SystemModel,
        cloud: &'a ParticleCloud,
        kernel: &KernelState,
        t_from: usize,
        u: Option<&'a [f64]>,
    ) -> Result<Self> {
        if cloud.state_dim() != model.state_dim() || cloud.param_dim() != model.param_dim() {
            return Err(Error::Config("cloud dimensions do not match the model".into()));
        }
        if kernel.dim() != cloud.param_dim() {
            return Err(Error::Contract("kernel state does not match parameter block".into()));
        }
        Ok(Self {
            model,
            transforms: model.transforms(),
            cloud,
            theta_hat: kernel.theta_hat(),
            chol_v: jittered_cholesky(&kernel.v_theta()),
            t_from,
            u,
            transition_params: TransitionParams::default(),
        })
    }

    pub fn with_transition_params(mut self, p: TransitionParams) -> Self {
        self.transition_params = p;
        self
    }

    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> NoiseDraws {
        NoiseDraws::draw(
            self.cloud.len(),
            self.model.process_noise_dim(),
            self.cloud.param_dim(),
            rng,
        )
    }

    /// `L xi_i` for every particle, independent of `h`.
    fn param_steps(&self, noise: &NoiseDraws) -> Vec<f64> {
        let r = noise.param_dim;
        let mut out = vec![0.0; noise.param.len()];
        if r == 0 {
            return out;
        }
        for (z, o) in noise.param.chunks(r).zip(out.chunks_mut(r)) {
            lower_mul(&self.chol_v, z, o);
        }
        out
    }

    /// Shrinks, walks and propagates every particle with kernel parameter
    /// `h`; evaluates the log-likelihood of `y` when given.
    pub fn propose(&self, h: f64, noise: &NoiseDraws, y: Option<&[f64]>) -> Result<Proposal> {
        let steps = self.param_steps(noise);
        self.propose_with_steps(h, noise, &steps, y)
    }

    fn propose_with_steps(
        &self,
        h: f64,
        noise: &NoiseDraws,
        steps: &[f64],
        y: Option<&[f64]>,
    ) -> Result<Proposal> {
        check_h(h)?;
        let n = self.cloud.len();
        let nx = self.cloud.state_dim();
        let r = self.cloud.param_dim();
        let d = nx + r;
        let q = noise.process_dim;
        let a = shrink_factor(h);
        let hat = self.theta_hat.as_slice();
        let src = self.cloud.particles().as_slice();

        let mut out = vec![0.0; d * n];
        let mut logliks = vec![0.0; n];
        out.par_chunks_mut(d * CHUNK)
            .zip(logliks.par_chunks_mut(CHUNK))
            .enumerate()
            .for_each(|(c, (dst, ll))| {
                let mut shrunk_nat = vec![0.0; r];
                let mut new_nat = vec![0.0; r];
                for (j, (dcol, lli)) in dst.chunks_mut(d).zip(ll.iter_mut()).enumerate() {
                    let i = c * CHUNK + j;
                    let p = &src[i * d..(i + 1) * d];
                    let (x, th) = p.split_at(nx);
                    let (xn, thn) = dcol.split_at_mut(nx);
                    for k in 0..r {
                        let shr = a * th[k] + (1.0 - a) * hat[k];
                        thn[k] = shr + h * steps[i * r + k];
                        shrunk_nat[k] = self.transforms[k].to_natural(shr);
                        new_nat[k] = self.transforms[k].to_natural(thn[k]);
                    }
                    self.model.transition(
                        self.t_from,
                        x,
                        self.u,
                        match self.transition_params {
                            TransitionParams::Walked => &new_nat,
                            TransitionParams::Shrunk => &shrunk_nat,
                        },
                        &noise.process[i * q..(i + 1) * q],
                        xn,
                    );
                    let finite = xn.iter().all(|v| v.is_finite());
                    *lli = match (finite, y) {
                        (false, _) => f64::NEG_INFINITY,
                        (true, None) => 0.0,
                        (true, Some(y)) => {
                            let l = self.model.measurement_loglik(xn, self.u, &new_nat, y);
                            if l.is_nan() {
                                f64::NEG_INFINITY
                            } else {
                                l
                            }
                        }
                    };
                }
            });
        let non_finite = (0..n)
            .filter(|&i| out[i * d..i * d + nx].iter().any(|v| !v.is_finite()))
            .count();
        Ok(Proposal {
            particles: DMatrix::from_vec(d, n, out),
            logliks,
            non_finite,
        })
    }
}

struct Evaluated {
    h: f64,
    kl: f64,
    particles: DMatrix<f64>,
    log_post: Vec<f64>,
    logliks: Vec<f64>,
}

/// Ordering key: finite divergences, then infinite, then failures; ties
/// broken toward smaller `h`.
fn key(kl: Option<f64>) -> (u8, f64) {
    match kl {
        Some(v) if v.is_finite() => (0, v),
        Some(_) => (1, 0.0),
        None => (2, 0.0),
    }
}

fn beats(a: (Option<f64>, f64), b: (Option<f64>, f64)) -> bool {
    let (ka, kb) = (key(a.0), key(b.0));
    ka.0 < kb.0 || (ka.0 == kb.0 && (ka.1 < kb.1 || (ka.1 == kb.1 && a.1 < b.1)))
}

/// Chooses `h` for the step into the next measurement and returns the
/// winning candidate's weighted cloud.
///
/// `cloud_prev` is the normalized cloud at the previous time; its weights
/// become the predicted weights. `kernel` supplies the shrinkage target and
/// covariance. `t_from` is the time index of `cloud_prev`.
#[allow(clippy::too_many_arguments)]
pub fn tune_h<R: Rng + ?Sized>(
    cloud_prev: &ParticleCloud,
    kernel: &KernelState,
    t_from: usize,
    y: &[f64],
    u: Option<&[f64]>,
    model: &dyn SystemModel,
    cfg: &TuningConfig,
    rng: &mut R,
) -> Result<TuningResult> {
    if !cloud_prev.is_normalized() {
        return Err(Error::Contract("tune_h requires a normalized cloud".into()));
    }
    if y.len() != model.measurement_dim() {
        return Err(Error::Config(format!(
            "measurement has length {} but the model expects {}",
            y.len(),
            model.measurement_dim()
        )));
    }
    cfg.validate()?;
    let prop = Propagator::new(model, cloud_prev, kernel, t_from, u)?
        .with_transition_params(cfg.transition_params);
    let log_pred = cloud_prev.log_weights();

    let shared = cfg.common_random_numbers.then(|| {
        let noise = prop.draw_noise(rng);
        let steps = prop.param_steps(&noise);
        (noise, steps)
    });

    let mut evaluations = Vec::new();
    let mut best: Option<Evaluated> = None;

    let mut evaluate = |h: f64, rng: &mut R| -> Result<Option<f64>> {
        let proposal = match &shared {
            Some((noise, steps)) => prop.propose_with_steps(h, noise, steps, Some(y))?,
            None => {
                let noise = prop.draw_noise(rng);
                prop.propose(h, &noise, Some(y))?
            }
        };
        let kl = match posterior_log_weights(log_pred, &proposal.logliks) {
            Ok(lw) => {
                let kl = kl_hat_log(log_pred, &lw.weights);
                let replace = best
                    .as_ref()
                    .is_none_or(|b| beats((Some(kl), h), (Some(b.kl), b.h)));
                if replace {
                    best = Some(Evaluated {
                        h,
                        kl,
                        particles: proposal.particles,
                        log_post: lw.weights,
                        logliks: proposal.logliks,
                    });
                }
                Some(kl)
            }
            Err(Error::AllWeightsZero) => None,
            Err(e) => return Err(e),
        };
        evaluations.push(CandidateScore { h, kl });
        Ok(kl)
    };

    match cfg.mode {
        TunerMode::Fixed(h) => {
            evaluate(h, rng)?;
        }
        TunerMode::Kl => {
            let (lo, hi) = cfg.h_bounds;
            let g = cfg.grid_points;
            let grid: Vec<f64> = (0..g)
                .map(|k| lo + (hi - lo) * k as f64 / (g - 1) as f64)
                .collect();
            let mut best_k = 0;
            let mut best_score = (None, f64::INFINITY);
            for (k, &h) in grid.iter().enumerate() {
                let kl = evaluate(h, rng)?;
                if k == 0 || beats((kl, h), best_score) {
                    best_k = k;
                    best_score = (kl, h);
                }
            }
            if best_score.0.is_some() && cfg.refine_iters > 0 && hi > lo {
                let mut a = grid[best_k.saturating_sub(1)];
                let mut b = grid[(best_k + 1).min(g - 1)];
                let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
                let mut c = b - inv_phi * (b - a);
                let mut d = a + inv_phi * (b - a);
                let mut fc = evaluate(c, rng)?;
                let mut fd = evaluate(d, rng)?;
                for _ in 0..cfg.refine_iters {
                    if !beats((fd, d), (fc, c)) {
                        b = d;
                        d = c;
                        fd = fc;
                        c = b - inv_phi * (b - a);
                        fc = evaluate(c, rng)?;
                    } else {
                        a = c;
                        c = d;
                        fc = fd;
                        d = a + inv_phi * (b - a);
                        fd = evaluate(d, rng)?;
                    }
                }
            }
        }
    }

    let best = best.ok_or(Error::TuningFailed)?;
    let proposed_cloud = ParticleCloud::from_parts(
        cloud_prev.state_dim(),
        cloud_prev.param_dim(),
        best.particles,
        best.log_post,
    )?;
    Ok(TuningResult {
        h_star: best.h,
        kl_value: best.kl,
        proposed_cloud,
        predicted_log_weights: log_pred.to_vec(),
        logliks: best.logliks,
        evaluations,
    })
}

/// Ratio of the importance density's spread to the measurement noise:
/// `trace(Cov_ISF[Z]) / trace(R)`, with `R` averaged over the cloud.
pub fn isf_likelihood_ratio(cloud: &ParticleCloud, model: &dyn SystemModel) -> Result<f64> {
    if !cloud.is_normalized() {
        return Err(Error::Contract("isf_likelihood_ratio requires a normalized cloud".into()));
    }
    let tr = model.transforms();
    let w = cloud.weights();
    let mut nat = cloud.particles().clone();
    let nx = cloud.state_dim();
    let mut noise_trace = 0.0;
    for i in 0..cloud.len() {
        let th = cloud.natural_params(i, &tr);
        for (k, v) in th.iter().enumerate() {
            nat[(nx + k, i)] = *v;
        }
        if w[i] > 0.0 {
            noise_trace += w[i] * model.measurement_noise_trace(&th);
        }
    }
    let spread = weighted_moments_of(&nat, &w).covariance.trace();
    Ok(spread / noise_trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn identical_weights_give_zero() {
        assert_eq!(kl_hat(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
    }

    #[test]
    fn hand_examples() {
        // -(0.5 ln 1.5 + 0.5 ln 0.5)
        assert_relative_eq!(kl_hat(&[0.5, 0.5], &[0.75, 0.25]).unwrap(), 0.143_841, epsilon = 1e-5);
        // -(0.9 ln(1/9) + 0.1 ln 9)
        assert_relative_eq!(kl_hat(&[0.9, 0.1], &[0.1, 0.9]).unwrap(), 1.757_780, epsilon = 1e-5);
    }

    #[test]
    fn zero_predicted_weight_contributes_nothing() {
        assert_relative_eq!(
            kl_hat(&[1.0, 0.0], &[0.5, 0.5]).unwrap(),
            2f64.ln(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn vanished_posterior_weight_is_infinite() {
        assert_eq!(kl_hat(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), f64::INFINITY);
    }

    #[test]
    fn unnormalized_inputs_rejected() {
        assert!(matches!(kl_hat(&[0.5, 0.6], &[0.5, 0.5]), Err(Error::Contract(_))));
        assert!(matches!(kl_hat(&[1.0], &[0.5, 0.5]), Err(Error::Contract(_))));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("kl".parse::<TunerMode>().unwrap(), TunerMode::Kl);
        assert_eq!("fixed:0.25".parse::<TunerMode>().unwrap(), TunerMode::Fixed(0.25));
        assert!("fixed:1.5".parse::<TunerMode>().is_err());
        assert!("auto".parse::<TunerMode>().is_err());
        assert_eq!(TunerMode::Fixed(0.1).to_string(), "fixed:0.1");
    }

    #[test]
    fn ordering_prefers_finite_then_smaller_h() {
        assert!(beats((Some(0.1), 0.5), (Some(0.2), 0.1)));
        assert!(beats((Some(0.1), 0.1), (Some(0.1), 0.5)));
        assert!(beats((Some(1e9), 0.9), (Some(f64::INFINITY), 0.0)));
        assert!(beats((Some(f64::INFINITY), 0.9), (None, 0.0)));
    }

    #[test]
    fn transition_params_select_the_driving_values() {
        use crate::models::Example1;
        use crate::SmcRng;
        use rand::{Rng, SeedableRng};

        let model = Example1::new();
        let n = 20;
        let mut rng = SmcRng::seed_from_u64(6);
        let mut data = Vec::new();
        for _ in 0..n {
            data.push(1.0);
            for k in 0..5 {
                data.push(0.1 * k as f64 + rng.random::<f64>());
            }
        }
        let cloud = ParticleCloud::uniform(1, 5, DMatrix::from_vec(6, n, data)).unwrap();
        let m = cloud.weighted_moments(crate::Block::Parameter).unwrap();
        let kernel = KernelState::new(0.0, m.mean, &m.covariance).unwrap();
        let mut noise = NoiseDraws::draw(n, 1, 5, &mut rng);
        noise.process.iter_mut().for_each(|v| *v = 0.0);
        let u = [0.5];
        let states = |p: TransitionParams, h: f64| {
            let prop = Propagator::new(&model, &cloud, &kernel, 0, Some(&u))
                .unwrap()
                .with_transition_params(p);
            let out = prop.propose(h, &noise, None).unwrap();
            out.particles.row(0).iter().copied().collect::<Vec<_>>()
        };
        // At h = 1 the shrunk locations coincide, the walked values do not.
        let shrunk = states(TransitionParams::Shrunk, 1.0);
        assert!(shrunk.iter().all(|&x| x == shrunk[0]));
        let walked = states(TransitionParams::Walked, 1.0);
        assert!(walked.iter().any(|&x| x != walked[0]));
        assert_eq!(states(TransitionParams::Shrunk, 0.0), states(TransitionParams::Walked, 0.0));
    }

    fn normalized(raw: &[f64]) -> Vec<f64> {
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    }

    proptest! {
        #[test]
        fn gibbs_inequality(
            pair in (2usize..40).prop_flat_map(|n| (
                proptest::collection::vec(1e-6f64..1.0, n),
                proptest::collection::vec(1e-6f64..1.0, n),
            ))
        ) {
            let p = normalized(&pair.0);
            let q = normalized(&pair.1);
            prop_assert!(kl_hat(&p, &q).unwrap() >= 0.0);
            prop_assert_eq!(kl_hat(&p, &p).unwrap(), 0.0);
        }
    }
}
