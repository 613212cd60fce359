//! Benchmark inverse problems and their priors.

pub mod deconv;
pub mod heat2d;
pub mod kernels;
pub mod lorenz96;
pub mod noise;
pub mod scenario;

use crate::error::{EnkiError, Result};

/// `n` equally spaced points on [-10, 10].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid1D {
    pub n: usize,
}

impl Grid1D {
    pub const LO: f64 = -10.0;
    pub const HI: f64 = 10.0;

    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(EnkiError::InvalidParameter(format!("1D grid needs at least 2 points, got {n}")));
        }
        Ok(Self { n })
    }

    pub fn spacing(&self) -> f64 {
        (Self::HI - Self::LO) / (self.n - 1) as f64
    }

    pub fn points(&self) -> Vec<f64> {
        let h = self.spacing();
        (0..self.n).map(|i| Self::LO + h * i as f64).collect()
    }
}

/// Interior nodes of the unit square, `s` per side, spacing 1/(s+1).
/// Node (i, j) has index i + s*j and sits at ((i+1)h, (j+1)h).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid2D {
    pub s: usize,
}

impl Grid2D {
    pub fn new(s: usize) -> Result<Self> {
        if s < 2 {
            return Err(EnkiError::InvalidParameter(format!("2D grid needs s >= 2, got {s}")));
        }
        Ok(Self { s })
    }

    pub fn h(&self) -> f64 {
        1.0 / (self.s + 1) as f64
    }

    pub fn len(&self) -> usize {
        self.s * self.s
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i + self.s * j
    }
}
