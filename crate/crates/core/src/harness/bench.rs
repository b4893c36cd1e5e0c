//! Wall-clock benchmarks: training epochs, test-set inference and routing.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::capsule::route;
use crate::data::Dataset;
use crate::error::Result;
use crate::init::{init_with_rng, InitScheme};
use crate::model::{Model, ModelConfig, Phase};
use crate::optim::AdamConfig;
use crate::tensor::Tensor;

use super::eval::evaluate;
use super::median;
use super::train::Trainer;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub primary_caps: usize,
    pub params: usize,
    /// Measured epochs only; the warm-up epoch is excluded.
    pub train_epoch_s: Vec<f64>,
    pub inference_s: Vec<f64>,
    /// Forward routing time accumulated over each training epoch.
    pub routing_s: Vec<f64>,
    pub median_train_epoch_s: f64,
    pub median_inference_s: f64,
    pub median_routing_s: f64,
}

/// Time `epochs` training epochs on `train` and inference over `test`
/// after one warm-up epoch.
pub fn benchmark(
    cfg: &ModelConfig,
    train: &Dataset,
    test: &Dataset,
    batch_size: usize,
    epochs: usize,
    seed: u64,
) -> Result<BenchReport> {
    let model = Model::<f32>::new(cfg.clone(), seed)?;
    let mut trainer = Trainer::new(model, AdamConfig::default())?;
    let mut train_s = Vec::new();
    let mut infer_s = Vec::new();
    let mut routing_s = Vec::new();
    for epoch in 0..=epochs {
        let stats = trainer.run_epoch(train, batch_size, seed, epoch as u64, Phase::Normal)?;
        let t = Instant::now();
        evaluate(&trainer.model, test, batch_size)?;
        let inf = t.elapsed().as_secs_f64();
        if epoch > 0 {
            train_s.push(stats.time.as_secs_f64());
            routing_s.push(stats.routing_time.as_secs_f64());
            infer_s.push(inf);
        }
    }
    Ok(BenchReport {
        primary_caps: cfg.primary_count()?,
        params: cfg.param_count()?,
        median_train_epoch_s: median(&train_s),
        median_inference_s: median(&infer_s),
        median_routing_s: median(&routing_s),
        train_epoch_s: train_s,
        inference_s: infer_s,
        routing_s,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoutingBench {
    pub n_in: usize,
    pub times_s: Vec<f64>,
    pub median_s: f64,
}

/// Isolated prediction-vector plus routing forward time for `n_in` input
/// capsules of `d_in` dims into `n_out` capsules of `d_out` dims.
#[allow(clippy::too_many_arguments)]
pub fn routing_benchmark(
    n_in: usize,
    n_out: usize,
    d_in: usize,
    d_out: usize,
    batch: usize,
    iterations: usize,
    reps: usize,
    seed: u64,
) -> Result<RoutingBench> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: Tensor<f32> = init_with_rng(&[batch, n_in, d_in], InitScheme::UniformFanIn { fan_in: 1 }, &mut rng);
    let w: Tensor<f32> = init_with_rng(&[n_in, n_out, d_out, d_in], InitScheme::Normal { std: 0.01 }, &mut rng);
    let mut times = Vec::with_capacity(reps);
    for rep in 0..=reps {
        let t = Instant::now();
        let mut g = Graph::new();
        let uv = g.variable(u.clone());
        let wv = g.variable(w.clone());
        let uh = g.predict_vectors(uv, wv)?;
        route(&mut g, uh, iterations)?;
        if rep > 0 {
            times.push(t.elapsed().as_secs_f64());
        }
    }
    Ok(RoutingBench {
        n_in,
        median_s: median(&times),
        times_s: times,
    })
}
