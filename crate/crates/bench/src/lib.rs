//! Seeded fixtures shared by the benchmarks.

use binlite::{Arch, ArchPreset, ModelGraph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0f32..1.0)).expect("non-empty shape")
}

pub fn model(arch: Arch, width: f64, input_size: usize) -> ModelGraph {
    ArchPreset::new(arch, width, 6)
        .with_input_size(input_size)
        .build(0)
        .expect("valid preset")
}
