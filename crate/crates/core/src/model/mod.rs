//! The classifier: patch embedding, a stack of blocks, final norm, and a
//! linear head reading the class token.

pub mod blocks;
mod config;
mod params;

use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::rng::TrainRng;
use crate::tensor::{grad_check_params, Coverage, GradCheckReport, Scalar, Tape, Tensor, Var};

pub use blocks::{
    attention_block, attention_over_features_block, block, feature_ff, linear_block, token_ff,
    Attention, BlockWeights, FeedForward, Mode, Norm,
};
pub use config::{
    build_preset, param_count, param_specs, Init, ModelConfig, ParamSpec, Preset, Variant,
    LAYER_NORM_EPS,
};
pub use params::{init_params, BoundParams, ParameterSet, INIT_STD};

/// Central-difference step used by the model-level gradient checks.
pub const GRADCHECK_STEP: f64 = 1e-5;

/// `[B, C, H, W]` images → `[B, N, D]` tokens: projected patches with the
/// class token prepended and the positional table added.
pub fn patch_embed<'t, T: Scalar>(
    images: &Var<'t, T>,
    params: &BoundParams<'t, T>,
    config: &ModelConfig,
) -> Result<Var<'t, T>> {
    let s = images.shape();
    let expected = [config.channels, config.image_size, config.image_size];
    if s.len() != 4 || s[1..] != expected {
        return Err(Error::shape(
            "patch_embed",
            format!(
                "expected [B, {}, {}, {}], got {s:?}",
                expected[0], expected[1], expected[2]
            ),
        ));
    }
    images
        .patchify(config.patch_size)?
        .matmul(&params.get("patch_embed.weight")?)?
        .add_bias(&params.get("patch_embed.bias")?)?
        .prepend_token(&params.get("cls_token")?)?
        .add_bias(&params.get("pos_embed")?)
}

/// Full forward pass to `[B, num_classes]` logits.
pub fn model_forward<'t, T: Scalar>(
    images: &Var<'t, T>,
    params: &BoundParams<'t, T>,
    config: &ModelConfig,
    mode: &mut Mode<'_>,
) -> Result<Var<'t, T>> {
    let mut x = patch_embed(images, params, config)?;
    for i in 0..config.depth {
        let w = BlockWeights::bind(params, config, i)?;
        x = blocks::block(&x, &w, config.dropout, mode)?;
    }
    let norm = Norm::bind(params, "norm")?;
    norm.apply(&x)?
        .select_token(0)?
        .matmul(&params.get("head.weight")?)?
        .add_bias(&params.get("head.bias")?)
}

/// Eval-mode logits without recording adjoints.
pub fn predict<T: Scalar>(
    params: &ParameterSet<T>,
    config: &ModelConfig,
    images: &Tensor<T>,
) -> Result<Tensor<T>> {
    let tape = Tape::no_grad();
    let bound = params.bind(&tape);
    let x = tape.constant(images);
    Ok(model_forward(&x, &bound, config, &mut Mode::Eval)?.value())
}

/// Central-difference check of the cross-entropy gradient with respect to
/// every parameter, in 64-bit. Parameters are the seeded initialization plus
/// uniform noise in `±0.1`, so biases and norm gains are not at special
/// values; images are uniform in `[-1, 1)`.
pub fn gradcheck_model(
    config: &ModelConfig,
    batch: usize,
    coverage: Coverage,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut params = init_params::<f64>(config, seed)?;
    let mut rng = TrainRng::seed_from_u64(seed ^ 0x6772_6164);
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let side = config.image_size;
    let images: Vec<f64> = (0..batch * config.channels * side * side)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let images = Tensor::from_vec(&[batch, config.channels, side, side], images)?;
    let labels: Vec<usize> = (0..batch).map(|i| i % config.num_classes).collect();
    let names: Vec<&str> = params.names().collect();
    let inputs: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    grad_check_params(
        |tape, vars| {
            let bound = BoundParams::from_vars(names.iter().copied().zip(vars.iter().copied()));
            let x = tape.constant(&images);
            model_forward(&x, &bound, config, &mut Mode::Eval)?.cross_entropy_logits(&labels)
        },
        &inputs,
        GRADCHECK_STEP,
        coverage,
    )
}
