//! Seeded weight initializers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitScheme {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    UniformFanIn { fan_in: usize },
    Normal { std: f64 },
    Zeros,
}

impl InitScheme {
    /// Fan-in uniform for a weight whose leading axis is the output axis.
    pub fn fan_in_of(shape: &[usize]) -> Self {
        InitScheme::UniformFanIn {
            fan_in: shape[1..].iter().product::<usize>().max(1),
        }
    }
}

pub fn init_with_rng<T: Real, R: Rng + ?Sized>(shape: &[usize], scheme: InitScheme, rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = match scheme {
        InitScheme::UniformFanIn { fan_in } => {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n)
                .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
                .collect()
        }
        InitScheme::Normal { std } if std > 0.0 => {
            let dist = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect()
        }
        InitScheme::Normal { .. } | InitScheme::Zeros => vec![T::zero(); n],
    };
    Tensor::new(shape.to_vec(), data).expect("initializer shape has positive extents")
}

/// Deterministic in `seed`.
pub fn init_weights<T: Real>(shape: &[usize], scheme: InitScheme, seed: u64) -> Tensor<T> {
    init_with_rng(shape, scheme, &mut ChaCha8Rng::seed_from_u64(seed))
}
