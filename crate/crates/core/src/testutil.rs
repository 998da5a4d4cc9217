//! Helpers shared by unit tests: seeded random data and finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Real, Shape, Tensor};

pub fn rand_vec<F: Real>(len: usize, seed: u64) -> Vec<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| F::lit(rng.random_range(-1.0..1.0)))
        .collect()
}

pub fn rand_tensor<F: Real>(shape: Shape, seed: u64) -> Tensor<F> {
    Tensor::from_vec(shape, rand_vec(shape.len(), seed)).unwrap()
}

/// Distinct values at least `gap` apart, shuffled. Keeps max-pool and ReLU
/// away from their kinks under finite differencing.
pub fn spread_vec(len: usize, gap: f64, seed: u64) -> Vec<f64> {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..len)
        .map(|i| (i as f64 - len as f64 / 2.0 + 0.5) * gap)
        .collect();
    v.shuffle(&mut rng);
    v
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-300 {
        diff
    } else {
        diff / scale
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
