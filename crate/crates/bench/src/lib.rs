//! Shared inputs for the benchmarks.

use diffnet_core::data::{generate_scene, SceneParams};
use diffnet_core::{BitemporalTile, Tensor, Xoshiro256};
use rand::Rng;

pub fn uniform(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = Xoshiro256::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("shape matches data")
}

pub fn scenes(channels: usize, size: usize, count: u64) -> Vec<BitemporalTile> {
    let params = SceneParams {
        channels,
        height: size,
        width: size,
        ..SceneParams::default()
    };
    (0..count)
        .map(|s| generate_scene(&params, s).expect("valid scene params"))
        .collect()
}
