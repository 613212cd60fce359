//! Lorenz 96 initial-condition inversion: G maps v(0) to selected
//! components of v(T), integrated with classical RK4.

use nalgebra::DVector;

use crate::ensemble::ForwardOperator;
use crate::error::{EnkiError, ForwardError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct L96Config {
    pub n: usize,
    pub forcing: f64,
    pub t_final: f64,
    pub h: f64,
    pub obs_indices: Vec<usize>,
}

impl L96Config {
    pub fn new(n: usize, obs_indices: Vec<usize>) -> Self {
        Self { n, forcing: 8.0, t_final: 0.3, h: 0.01, obs_indices }
    }

    pub fn steps(&self) -> usize {
        (self.t_final / self.h).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 4 {
            return Err(EnkiError::InvalidParameter(format!("L96 needs n >= 4, got {}", self.n)));
        }
        if !(self.h > 0.0 && self.t_final > 0.0) {
            return Err(EnkiError::InvalidParameter("L96 step and final time must be positive".into()));
        }
        if (self.steps() as f64 * self.h - self.t_final).abs() > 1e-12 {
            return Err(EnkiError::InvalidParameter(format!(
                "L96 step {} does not divide final time {}",
                self.h, self.t_final
            )));
        }
        if let Some(bad) = self.obs_indices.iter().find(|i| **i >= self.n) {
            return Err(EnkiError::InvalidParameter(format!("L96 observation index {bad} out of range")));
        }
        Ok(())
    }
}

/// dv_k/dt = v_{k-1} (v_{k+1} - v_{k-2}) - v_k + F with cyclic indices.
pub fn tendency(v: &[f64], forcing: f64, out: &mut [f64]) {
    let n = v.len();
    for k in 0..n {
        let km1 = v[(k + n - 1) % n];
        let km2 = v[(k + n - 2) % n];
        let kp1 = v[(k + 1) % n];
        out[k] = km1 * (kp1 - km2) - v[k] + forcing;
    }
}

/// Integrates `steps` RK4 steps of size `h` in place.
pub fn integrate(v: &mut [f64], forcing: f64, h: f64, steps: usize) -> std::result::Result<(), ForwardError> {
    let n = v.len();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    for step in 0..steps {
        tendency(v, forcing, &mut k1);
        for i in 0..n {
            tmp[i] = v[i] + 0.5 * h * k1[i];
        }
        tendency(&tmp, forcing, &mut k2);
        for i in 0..n {
            tmp[i] = v[i] + 0.5 * h * k2[i];
        }
        tendency(&tmp, forcing, &mut k3);
        for i in 0..n {
            tmp[i] = v[i] + h * k3[i];
        }
        tendency(&tmp, forcing, &mut k4);
        for i in 0..n {
            v[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(ForwardError::Blowup { step });
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Lorenz96 {
    pub cfg: L96Config,
}

impl Lorenz96 {
    pub fn new(cfg: L96Config) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    /// Full state at the final time.
    pub fn final_state(&self, v0: &DVector<f64>) -> std::result::Result<DVector<f64>, ForwardError> {
        if v0.iter().any(|x| !x.is_finite()) {
            return Err(ForwardError::NonFiniteInput);
        }
        let mut v: Vec<f64> = v0.iter().cloned().collect();
        integrate(&mut v, self.cfg.forcing, self.cfg.h, self.cfg.steps())?;
        Ok(DVector::from_vec(v))
    }
}

impl ForwardOperator for Lorenz96 {
    fn input_dim(&self) -> usize {
        self.cfg.n
    }

    fn output_dim(&self) -> usize {
        self.cfg.obs_indices.len()
    }

    fn apply(&self, u: &DVector<f64>) -> std::result::Result<DVector<f64>, ForwardError> {
        let v = self.final_state(u)?;
        Ok(DVector::from_iterator(self.cfg.obs_indices.len(), self.cfg.obs_indices.iter().map(|&i| v[i])))
    }
}
