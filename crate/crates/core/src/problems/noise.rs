use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Root mean square of the entries.
pub fn rms(d: &DVector<f64>) -> f64 {
    (d.norm_squared() / d.len().max(1) as f64).sqrt()
}

/// d + e with e ~ N(0, sigma^2 I), sigma = percent * rms(d).
pub fn add_noise_with<R: Rng + ?Sized>(d: &DVector<f64>, percent: f64, rng: &mut R) -> DVector<f64> {
    let sigma = percent * rms(d);
    d.map(|x| x + sigma * rng.sample::<f64, _>(StandardNormal))
}

pub fn add_noise(d: &DVector<f64>, percent: f64, seed: u64) -> DVector<f64> {
    add_noise_with(d, percent, &mut ChaCha8Rng::seed_from_u64(seed))
}
