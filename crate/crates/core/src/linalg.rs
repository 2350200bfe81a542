//! Small dense-matrix helpers.

use nalgebra::{DMatrix, DVector};

pub const POWER_ITERATION_TOL: f64 = 1e-12;
pub const POWER_ITERATION_MAX: usize = 10_000;
/// Singular values below `RANK_CUTOFF * sigma_max` count as zero.
pub const RANK_CUTOFF: f64 = 1e-10;

/// Largest absolute entry.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Spectral norm `|A|_op`, by power iteration on `A^T A`.
pub fn operator_norm(a: &DMatrix<f64>) -> f64 {
    if a.ncols() == 0 || max_abs(a) == 0.0 {
        return 0.0;
    }
    let ata = a.transpose() * a;
    // Deterministic, non-symmetric start so it is not orthogonal to the top
    // singular vector of structured matrices.
    let mut v = DVector::from_fn(ata.ncols(), |i, _| 1.0 + 0.37 * ((i + 1) as f64).sin());
    v /= v.norm();
    let mut estimate = 0.0;
    for _ in 0..POWER_ITERATION_MAX {
        let w = &ata * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / norm;
        if (next - estimate).abs() <= POWER_ITERATION_TOL * next.abs() {
            estimate = next;
            break;
        }
        estimate = next;
    }
    estimate.max(0.0).sqrt()
}

/// Smallest singular value that survives the rank cutoff; `None` for the zero matrix.
pub fn smallest_nonzero_singular_value(a: &DMatrix<f64>) -> Option<f64> {
    let sv = a.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0f64, f64::max);
    if max == 0.0 {
        return None;
    }
    sv.iter()
        .cloned()
        .filter(|&s| s > RANK_CUTOFF * max)
        .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |m| m.min(s))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn operator_norm_of_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, -3.0, 2.0]));
        assert!((operator_norm(&m) - 3.0).abs() < 1e-10);
    }

    #[test]
    fn operator_norm_matches_svd() {
        let m = DMatrix::from_fn(5, 5, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0 + 0.1 * i as f64);
        let svd_max = m.clone().singular_values().max();
        assert!((operator_norm(&m) - svd_max).abs() < 1e-8 * svd_max);
    }

    #[test]
    fn zero_matrix() {
        let m = DMatrix::<f64>::zeros(3, 3);
        assert_eq!(operator_norm(&m), 0.0);
        assert_eq!(smallest_nonzero_singular_value(&m), None);
    }

    #[test]
    fn projection_sigma_min_ignores_kernel() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 0.0, 0.0]));
        assert_eq!(smallest_nonzero_singular_value(&m), Some(1.0));
    }
}
