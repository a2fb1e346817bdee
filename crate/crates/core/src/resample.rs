//! Systematic, stratified and residual resampling.
//!
//! All schemes are unbiased: the expected number of copies of particle `i`
//! is `N * W^i`. The output cloud has the same size and weights exactly
//! `1/N`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::ParticleCloud;
use crate::error::{Error, Result};
use crate::linalg::compensated_cumsum;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResampleScheme {
    /// One uniform offset shared by all strata.
    #[default]
    Systematic,
    /// One independent uniform per stratum.
    Stratified,
    /// Deterministic `floor(N W^i)` copies, stratified on the remainder.
    Residual,
}

impl fmt::Display for ResampleScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResampleScheme::Systematic => "systematic",
            ResampleScheme::Stratified => "stratified",
            ResampleScheme::Residual => "residual",
        })
    }
}

impl FromStr for ResampleScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "systematic" => Ok(ResampleScheme::Systematic),
            "stratified" => Ok(ResampleScheme::Stratified),
            "residual" => Ok(ResampleScheme::Residual),
            other => Err(Error::Config(format!(
                "unknown resampler '{other}' (expected systematic, stratified or residual)"
            ))),
        }
    }
}

/// Ancestor indices of an `N`-particle resample of `weights`.
pub fn resample_indices<R: Rng + ?Sized>(
    weights: &[f64],
    scheme: ResampleScheme,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let n = weights.len();
    if n == 0 {
        return Err(Error::Contract("cannot resample an empty cloud".into()));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Contract("negative or NaN weight".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-8 {
        return Err(Error::Contract(format!(
            "resampling needs normalized weights, sum = {total}"
        )));
    }
    Ok(match scheme {
        ResampleScheme::Systematic => {
            let u0: f64 = rng.random();
            let points: Vec<f64> = (0..n).map(|k| (k as f64 + u0) / n as f64).collect();
            invert_cdf(weights, &points)
        }
        ResampleScheme::Stratified => {
            let points: Vec<f64> = (0..n)
                .map(|k| (k as f64 + rng.random::<f64>()) / n as f64)
                .collect();
            invert_cdf(weights, &points)
        }
        ResampleScheme::Residual => residual(weights, rng),
    })
}

/// Resamples a normalized cloud; particle values are copied verbatim.
pub fn resample<R: Rng + ?Sized>(
    cloud: &ParticleCloud,
    scheme: ResampleScheme,
    rng: &mut R,
) -> Result<ParticleCloud> {
    if !cloud.is_normalized() {
        return Err(Error::Contract("resample requires a normalized cloud".into()));
    }
    let indices = resample_indices(&cloud.weights(), scheme, rng)?;
    Ok(cloud.select(&indices))
}

/// Copy counts per particle from ancestor indices.
pub fn counts(indices: &[usize], n: usize) -> Vec<usize> {
    let mut c = vec![0; n];
    for &i in indices {
        c[i] += 1;
    }
    c
}

/// Maps sorted points in `[0, 1)` to particle indices through the weight
/// CDF. The last cumulative value is clamped to exactly 1.
fn invert_cdf(weights: &[f64], sorted_points: &[f64]) -> Vec<usize> {
    let mut cdf = compensated_cumsum(weights);
    if let Some(last) = cdf.last_mut() {
        *last = 1.0;
    }
    let last = weights.len() - 1;
    let mut out = Vec::with_capacity(sorted_points.len());
    let mut j = 0;
    for &p in sorted_points {
        while j < last && cdf[j] <= p {
            j += 1;
        }
        out.push(j);
    }
    out
}

fn residual<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Vec<usize> {
    let n = weights.len();
    let nf = n as f64;
    let mut out = Vec::with_capacity(n);
    let mut rest = Vec::with_capacity(n);
    for (i, &w) in weights.iter().enumerate() {
        let expected = nf * w;
        let copies = expected.floor() as usize;
        out.extend(std::iter::repeat_n(i, copies));
        rest.push((expected - copies as f64).max(0.0));
    }
    // Rounding can push the deterministic part to N + 1 in pathological
    // cases; trim rather than overflow.
    out.truncate(n);
    let remaining = n - out.len();
    if remaining == 0 {
        return out;
    }
    let total: f64 = rest.iter().sum();
    if total <= 0.0 {
        // All mass was allocated deterministically up to rounding.
        let mut i = 0;
        while out.len() < n {
            out.push(i % n);
            i += 1;
        }
        return out;
    }
    let rest: Vec<f64> = rest.iter().map(|r| r / total).collect();
    let points: Vec<f64> = (0..remaining)
        .map(|k| (k as f64 + rng.random::<f64>()) / remaining as f64)
        .collect();
    out.extend(invert_cdf(&rest, &points));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::SmcRng;
    use nalgebra::DMatrix;
    use rand::{RngCore, SeedableRng};

    /// Counts 64-bit draws taken from the inner generator.
    struct CountingRng {
        inner: SmcRng,
        draws: usize,
    }

    impl RngCore for CountingRng {
        fn next_u32(&mut self) -> u32 {
            self.draws += 1;
            self.inner.next_u32()
        }
        fn next_u64(&mut self) -> u64 {
            self.draws += 1;
            self.inner.next_u64()
        }
        fn fill_bytes(&mut self, dst: &mut [u8]) {
            self.draws += 1;
            self.inner.fill_bytes(dst)
        }
    }

    fn counting(seed: u64) -> CountingRng {
        CountingRng {
            inner: SmcRng::seed_from_u64(seed),
            draws: 0,
        }
    }

    #[test]
    fn degenerate_weights_copy_one_particle() {
        for scheme in [
            ResampleScheme::Systematic,
            ResampleScheme::Stratified,
            ResampleScheme::Residual,
        ] {
            let m = DMatrix::from_row_slice(1, 3, &[10.0, 20.0, 30.0]);
            let lw = vec![0.0, f64::NEG_INFINITY, f64::NEG_INFINITY];
            let c = ParticleCloud::from_parts(1, 0, m, lw).unwrap();
            let out = resample(&c, scheme, &mut SmcRng::seed_from_u64(1)).unwrap();
            assert_eq!(out.particles().as_slice(), &[10.0, 10.0, 10.0]);
            for w in out.weights() {
                assert!((w - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn systematic_uniform_weights_copy_each_once() {
        // For any offset u in [0, 1/N) every stratum hits its own particle;
        // sweep offsets explicitly.
        let w = [0.25; 4];
        for k in 0..100 {
            let u0 = k as f64 / 100.0;
            let pts: Vec<f64> = (0..4).map(|j| (j as f64 + u0) / 4.0).collect();
            assert_eq!(invert_cdf(&w, &pts), vec![0, 1, 2, 3]);
        }
        let mut rng = SmcRng::seed_from_u64(3);
        for _ in 0..100 {
            let idx = resample_indices(&w, ResampleScheme::Systematic, &mut rng).unwrap();
            assert_eq!(idx, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn draw_counts_per_scheme() {
        let w = [0.5, 0.3, 0.2];
        let mut rng = counting(1);
        resample_indices(&w, ResampleScheme::Systematic, &mut rng).unwrap();
        assert_eq!(rng.draws, 1);

        let mut rng = counting(1);
        resample_indices(&w, ResampleScheme::Stratified, &mut rng).unwrap();
        assert_eq!(rng.draws, 3);

        // floor(3 * 0.5) = 1 deterministic copy, two stratified draws.
        let mut rng = counting(1);
        resample_indices(&w, ResampleScheme::Residual, &mut rng).unwrap();
        assert_eq!(rng.draws, 2);

        let w = [0.25; 4];
        let mut rng = counting(1);
        resample_indices(&w, ResampleScheme::Residual, &mut rng).unwrap();
        assert_eq!(rng.draws, 0);
    }

    #[test]
    fn output_size_and_weights() {
        let mut rng = SmcRng::seed_from_u64(8);
        let raw: Vec<f64> = (1..=50).map(|i| (i as f64).sqrt()).collect();
        let total: f64 = raw.iter().sum();
        let lw: Vec<f64> = raw.iter().map(|r| (r / total).ln()).collect();
        let m = DMatrix::from_fn(2, 50, |r, c| (r * 100 + c) as f64);
        let c = ParticleCloud::from_parts(1, 1, m, lw).unwrap();
        for scheme in [
            ResampleScheme::Systematic,
            ResampleScheme::Stratified,
            ResampleScheme::Residual,
        ] {
            let out = resample(&c, scheme, &mut rng).unwrap();
            assert_eq!(out.len(), 50);
            assert!(out.is_normalized());
            assert!(out.log_weights().iter().all(|&w| w == -(50f64).ln()));
            assert!((out.effective_sample_size().unwrap() - 50.0).abs() < 1e-9);
        }
    }

    #[test]
    fn unnormalized_weights_rejected() {
        let mut rng = SmcRng::seed_from_u64(0);
        assert!(matches!(
            resample_indices(&[0.5, 0.6], ResampleScheme::Systematic, &mut rng),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn scheme_parsing() {
        assert_eq!("residual".parse::<ResampleScheme>().unwrap(), ResampleScheme::Residual);
        assert!("multinomial".parse::<ResampleScheme>().is_err());
        assert_eq!(ResampleScheme::Stratified.to_string(), "stratified");
    }

    #[test]
    fn tiny_weights_never_index_out_of_range() {
        let mut w = vec![1e-300; 1000];
        w[0] = 1.0 - 999e-300;
        let mut rng = SmcRng::seed_from_u64(4);
        for scheme in [
            ResampleScheme::Systematic,
            ResampleScheme::Stratified,
            ResampleScheme::Residual,
        ] {
            let idx = resample_indices(&w, scheme, &mut rng).unwrap();
            assert!(idx.iter().all(|&i| i < 1000));
        }
    }
}
