use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_tensor(shape: &[usize], std: f64, rng: &mut SeededRng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

pub fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut SeededRng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}
