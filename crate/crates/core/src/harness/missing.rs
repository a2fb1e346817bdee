use rand::seq::index::sample;
use rand::Rng;

/// Time indices in `[2, steps]` without a measurement.
///
/// `round(steps * percent / 100)` indices are drawn uniformly without
/// replacement, except that `t = 1` is always measured, so at most
/// `steps - 1` can be missing. The result is sorted.
pub fn generate_missing_pattern<R: Rng + ?Sized>(steps: usize, percent: f64, rng: &mut R) -> Vec<usize> {
    let wanted = (steps as f64 * percent.clamp(0.0, 100.0) / 100.0).round() as usize;
    let count = wanted.min(steps.saturating_sub(1));
    if count == 0 {
        return Vec::new();
    }
    let mut out: Vec<usize> = sample(rng, steps - 1, count).into_iter().map(|i| i + 2).collect();
    out.sort_unstable();
    out
}
