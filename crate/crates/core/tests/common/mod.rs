#![allow(dead_code)]

use std::path::Path;

use attcdc::data::{generate_synthetic, Preset, SyntheticOutput, SyntheticSpec};
use attcdc::model::ModelConfig;
use attcdc::nn::{Activation, ConvMode};
use attcdc::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn seeded(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

pub fn seeded_f32(shape: &[usize], seed: u64) -> Tensor<f32> {
    seeded(shape, seed).cast()
}

/// Two short blocks, small growth: fast enough for per-test training runs.
pub fn tiny_config(num_classes: usize, attention: bool, conv_mode: ConvMode) -> ModelConfig {
    ModelConfig {
        block_layout: vec![2, 2],
        growth_rate: 4,
        compression: 0.5,
        stem_channels: 8,
        num_classes,
        conv_mode,
        block_conv_modes: None,
        attention,
        attention_reduction: 4,
        attention_activation: Activation::Relu,
        input_channels: 3,
        input_size: 32,
    }
}

/// A small four-class blob dataset at 32×32.
pub fn small_blobs(root: &Path, per_class: usize, seed: u64) -> SyntheticOutput {
    let spec = SyntheticSpec { counts: vec![per_class; 4], image_size: 32, blob_sigma: 3.0, ..SyntheticSpec::preset(Preset::Easy, seed) };
    generate_synthetic(&spec, root).unwrap()
}
