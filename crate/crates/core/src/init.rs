//! Seeded parameter initializers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::{Dtype, Tensor};

/// Gaussian init, `N(0, std²)`.
pub fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64, dtype: Dtype) -> Tensor {
    let normal = Normal::new(0.0, std).expect("std must be finite and positive");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::from_vec(shape, dtype, data).expect("shape/data agree by construction")
}

pub fn ones(shape: Vec<usize>, dtype: Dtype) -> Tensor {
    Tensor::full(shape, dtype, 1.0)
}

/// Sample log-uniformly from `[lo, hi]`.
pub fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let u: f64 = rng.gen();
    (lo.ln() + u * (hi.ln() - lo.ln())).exp()
}

/// Inverse of softplus: returns `x` with `softplus(x) = y` for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    debug_assert!(y > 0.0);
    y.exp_m1().ln()
}
