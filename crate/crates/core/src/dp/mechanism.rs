//! Clipping, Gaussian noising and Poisson lot sampling.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::DpError;
use crate::model::{GradSet, TensorMap};
use crate::rng::derived;

/// L2 norm over every coordinate of every tensor.
pub fn joint_norm(g: &GradSet) -> f64 {
    g.l2_norm()
}

/// Scale `g` by `min(1, C/‖g‖)`. `C = ∞` leaves it untouched.
pub fn clip(grad: &GradSet, c: f64) -> Result<GradSet, DpError> {
    if !(c > 0.0) {
        return Err(DpError::InvalidSpec(format!("clip norm must be positive, got {c}")));
    }
    if !grad.all_finite() {
        return Err(DpError::NonFiniteGradient);
    }
    let norm = joint_norm(grad);
    let mut out = grad.clone();
    if norm > c {
        out.scale(c / norm);
    }
    Ok(out)
}

/// `(Σ clipped + N(0, σ²C²·I)) / L`. `like` supplies names and shapes so an
/// empty lot still yields pure noise of the right form.
pub fn noisy_aggregate(
    clipped: &[GradSet],
    like: &TensorMap,
    c: f64,
    sigma: f64,
    lot_size_expected: f64,
    seed: u64,
) -> Result<GradSet, DpError> {
    if !(lot_size_expected > 0.0) {
        return Err(DpError::InvalidSpec(format!(
            "expected lot size must be positive, got {lot_size_expected}"
        )));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(DpError::InvalidSpec(format!("noise multiplier {sigma} is invalid")));
    }
    if sigma > 0.0 && !c.is_finite() {
        return Err(DpError::InvalidSpec("noise needs a finite clip norm".into()));
    }
    let mut sum = like.zeros_like();
    for g in clipped {
        let norm = joint_norm(g);
        if norm > c + 1e-6 {
            return Err(DpError::UnclippedInput { norm, clip: c });
        }
        for (name, t) in g.iter() {
            sum.accumulate(name, t);
        }
    }
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma * c).expect("finite positive std");
        let mut rng = derived(seed, "dp_noise");
        for (_, t) in sum.iter_mut() {
            for v in t.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }
    for (_, t) in sum.iter_mut() {
        t.mapv_inplace(|v| v / lot_size_expected);
    }
    Ok(sum)
}

/// Indices in `0..n`, each kept independently with probability `q`.
pub fn poisson_sample(n: usize, q: f64, seed: u64) -> Result<Vec<usize>, DpError> {
    if !(0.0..=1.0).contains(&q) {
        return Err(DpError::InvalidRate(q));
    }
    let mut rng = derived(seed, "poisson");
    Ok((0..n).filter(|_| rng.random::<f64>() < q).collect())
}
