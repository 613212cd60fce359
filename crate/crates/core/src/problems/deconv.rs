//! Deconvolution with the compactly supported bump
//! Psi(x) = C_a (x + a)^2 (x - a)^2 on [-a, a].

use nalgebra::DMatrix;

use super::Grid1D;
use crate::error::{EnkiError, Result};

pub const DEFAULT_HALF_WIDTH: f64 = 0.235;

/// C_a = 15 / (16 a^5), which makes the bump integrate to one.
pub fn normalization(a: f64) -> f64 {
    15.0 / (16.0 * a.powi(5))
}

pub fn kernel(x: f64, a: f64) -> f64 {
    if x.abs() > a {
        0.0
    } else {
        normalization(a) * (x * x - a * a).powi(2)
    }
}

/// A_ij = dx * Psi(x_i - x_j); contributions from outside [-10, 10] are
/// dropped (zero padding).
pub fn deconv_operator(grid: &Grid1D, a: f64) -> Result<DMatrix<f64>> {
    if !(a > 0.0) {
        return Err(EnkiError::InvalidParameter(format!("kernel half-width must be positive, got {a}")));
    }
    let x = grid.points();
    let dx = grid.spacing();
    Ok(DMatrix::from_fn(grid.n, grid.n, |i, j| dx * kernel(x[i] - x[j], a)))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Composite Simpson rule.
    fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, panels: usize) -> f64 {
        let h = (hi - lo) / panels as f64;
        let mut s = f(lo) + f(hi);
        for i in 1..panels {
            s += f(lo + h * i as f64) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn normalization_matches_quadrature() {
        let a = DEFAULT_HALF_WIDTH;
        let raw = simpson(|x| (x + a).powi(2) * (x - a).powi(2), -a, a, 2000);
        let ca = 1.0 / raw;
        assert!((normalization(a) - ca).abs() <= 1e-10 * ca);
        assert!((normalization(a) / 1.30805e3 - 1.0).abs() < 1e-4);
    }

    #[test]
    fn kernel_roots_and_symmetry() {
        let a = DEFAULT_HALF_WIDTH;
        assert_eq!(kernel(a, a), 0.0);
        assert_eq!(kernel(-a, a), 0.0);
        for x in [0.01, 0.1, 0.2] {
            assert_eq!(kernel(x, a), kernel(-x, a));
        }
        let grid = Grid1D::new(101).unwrap();
        let m = deconv_operator(&grid, a).unwrap();
        assert_eq!(m, m.transpose());
    }

    #[test]
    fn interior_rows_sum_near_one() {
        let grid = Grid1D::new(1000).unwrap();
        let m = deconv_operator(&grid, DEFAULT_HALF_WIDTH).unwrap();
        let dx = grid.spacing();
        for i in 20..980 {
            let s: f64 = m.row(i).iter().sum();
            assert!((s - 1.0).abs() <= 2.0 * dx, "row {i}: {s}");
        }
    }
}
