//! Small numeric helpers shared across the filter: log-space reductions,
//! compensated summation and a Cholesky factorization that tolerates
//! semi-definite input.

use nalgebra::{DMatrix, DVector};

/// Relative jitter added to the diagonal of a covariance that is not
/// numerically positive definite, scaled by `trace / dim`.
pub const COVARIANCE_JITTER: f64 = 1e-10;

const MAX_JITTER_ROUNDS: usize = 12;

/// `log(sum(exp(v)))` with max-subtraction. Returns `-inf` when every entry
/// is `-inf` (or the slice is empty). Summation runs in index order.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Neumaier-compensated running sums.
pub fn compensated_cumsum(values: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
        out.push(sum + comp);
    }
    out
}

pub fn compensated_sum(values: &[f64]) -> f64 {
    compensated_cumsum(values).last().copied().unwrap_or(0.0)
}

/// Symmetrize in place: `(A + A^T) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Lower Cholesky factor of a symmetric PSD matrix.
///
/// When the plain factorization fails, `COVARIANCE_JITTER * trace / dim` is
/// added to the diagonal (growing tenfold per retry). A matrix with zero
/// trace factors to the zero matrix, so sampling from it is a no-op.
pub fn jittered_cholesky(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let dim = cov.nrows();
    if dim == 0 {
        return DMatrix::zeros(0, 0);
    }
    if let Some(chol) = cov.clone().cholesky() {
        return chol.l();
    }
    let trace = cov.trace();
    if !(trace > 0.0) || !trace.is_finite() {
        return DMatrix::zeros(dim, dim);
    }
    let mut eps = COVARIANCE_JITTER * trace / dim as f64;
    for _ in 0..MAX_JITTER_ROUNDS {
        let mut jittered = cov.clone();
        for i in 0..dim {
            jittered[(i, i)] += eps;
        }
        if let Some(chol) = jittered.cholesky() {
            return chol.l();
        }
        eps *= 10.0;
    }
    // Fall back to the diagonal; only reachable for badly indefinite input.
    DMatrix::from_fn(dim, dim, |i, j| {
        if i == j {
            cov[(i, i)].max(0.0).sqrt()
        } else {
            0.0
        }
    })
}

/// Checks symmetry and non-negative eigenvalues within `tol`.
pub fn is_psd(cov: &DMatrix<f64>, tol: f64) -> bool {
    if !cov.is_square() {
        return false;
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let n = cov.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (cov[(i, j)] - cov[(j, i)]).abs() > tol * (1.0 + cov[(i, j)].abs()) {
                return false;
            }
        }
    }
    if n == 0 {
        return true;
    }
    let eig = cov.clone().symmetric_eigen();
    eig.eigenvalues.iter().all(|&l| l >= -tol)
}

/// `L * z` for a lower-triangular `L`, written into `out`.
#[inline]
pub fn lower_mul(l: &DMatrix<f64>, z: &[f64], out: &mut [f64]) {
    let n = l.nrows();
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..=i {
            acc += l[(i, j)] * z[j];
        }
        out[i] = acc;
    }
}

pub fn dvec(values: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn log_sum_exp_matches_direct_sum() {
        let v = [0.1_f64, -2.0, 3.5];
        let direct = v.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert_relative_eq!(log_sum_exp(&v), direct, epsilon = 1e-14);
    }

    #[test]
    fn log_sum_exp_survives_large_magnitudes() {
        let v = [-1000.0, -1000.0];
        assert_relative_eq!(log_sum_exp(&v), -1000.0 + 2f64.ln(), epsilon = 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn compensated_sum_of_tenths() {
        let v = vec![0.1; 10];
        assert_eq!(compensated_sum(&v), 1.0);
    }

    #[test]
    fn cholesky_of_singular_matrix_is_usable() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let l = jittered_cholesky(&cov);
        let back = &l * l.transpose();
        assert_relative_eq!(back, cov, epsilon = 1e-6);
    }

    #[test]
    fn zero_matrix_factors_to_zero() {
        let l = jittered_cholesky(&DMatrix::zeros(3, 3));
        assert!(l.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn psd_check() {
        assert!(is_psd(&DMatrix::identity(3, 3), 1e-12));
        let neg = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(!is_psd(&neg, 1e-12));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(!is_psd(&asym, 1e-12));
    }
}
