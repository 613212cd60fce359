//! Gaussian-process covariance kernels.

use nalgebra::DMatrix;

use crate::error::{EnkiError, Result};

/// K_ij = variance * exp(-2 sin^2(pi |x_i - x_j| / p) / l^2)
pub fn exp_sine_squared_cov(points: &[f64], length_scale: f64, periodicity: f64, variance: f64) -> Result<DMatrix<f64>> {
    if !(length_scale > 0.0 && periodicity > 0.0) {
        return Err(EnkiError::InvalidParameter("length scale and periodicity must be positive".into()));
    }
    let n = points.len();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        let s = (std::f64::consts::PI * (points[i] - points[j]).abs() / periodicity).sin();
        variance * (-2.0 * s * s / (length_scale * length_scale)).exp()
    }))
}
