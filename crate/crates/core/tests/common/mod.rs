#![allow(dead_code)]

use ffvit::model::{init_params, ModelConfig, ParameterSet};
use ffvit::train::TrainConfig;
use ffvit::{Preset, Scalar, Tensor, TrainRng, Variant};
use rand::{Rng, SeedableRng};

/// Uniform entries in `[-1, 1)`.
pub fn random<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = TrainRng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::<f64>::from_vec(shape, data).unwrap().cast()
}

pub fn reduced(variant: Variant) -> ModelConfig {
    Preset::Reduced.config().with_variant(variant)
}

/// Initialized parameters with every `block.*` tensor replaced by zeros.
pub fn zero_block_params<T: Scalar>(config: &ModelConfig, seed: u64) -> ParameterSet<T> {
    let mut p = init_params::<T>(config, seed).unwrap();
    for (name, t) in p.iter_mut() {
        if name.starts_with("block.") {
            t.data_mut().fill(T::zero());
        }
    }
    p
}

/// Desk defaults with one epoch of warmup for the default synthetic split.
pub fn desk_config(seed: u64, epochs: u64) -> TrainConfig {
    TrainConfig {
        seed,
        epochs,
        ..TrainConfig::desk(ffvit::data::SYNTHETIC_TRAIN_PER_CLASS * 10)
    }
}

/// Reorders axis 1 of a `[B, N, D]` tensor: output row `i` is input row `perm[i]`.
pub fn permute_tokens<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let s = x.shape();
    let (b, n, d) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(x.numel());
    for bi in 0..b {
        for &src in perm {
            let start = (bi * n + src) * d;
            out.extend_from_slice(&x.data()[start..start + d]);
        }
    }
    Tensor::from_vec(s, out).unwrap()
}
