mod common;

use common::{permute_tokens, random, reduced, zero_block_params};
use ffvit::model::{
    block, feature_ff, init_params, model_forward, predict, token_ff, Attention, BlockWeights,
    FeedForward, Mode,
};
use ffvit::{Error, Preset, Tape, Tensor, Variant};
use proptest::prelude::*;

const VARIANTS: [Variant; 3] = [
    Variant::FfOnly,
    Variant::AttentionBaseline,
    Variant::AttentionOnly,
];

fn ff<'t>(tape: &'t Tape<f64>, width: usize, hidden: usize, seed: u64) -> FeedForward<'t, f64> {
    FeedForward {
        w1: tape.constant(&random(&[width, hidden], seed)),
        b1: tape.constant(&random(&[hidden], seed + 1)),
        w2: tape.constant(&random(&[hidden, width], seed + 2)),
        b2: tape.constant(&random(&[width], seed + 3)),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn zero_weight_blocks_are_exact_identities(seed in 0u64..1000, batch in 1usize..4) {
        for variant in VARIANTS {
            let config = reduced(variant);
            let params = zero_block_params::<f32>(&config, seed);
            let tape = Tape::no_grad();
            let bound = params.bind(&tape);
            let x = random::<f32>(&[batch, config.num_tokens(), config.dim], seed);
            let mut y = tape.constant(&x);
            for i in 0..config.depth {
                let w = BlockWeights::bind(&bound, &config, i).unwrap();
                y = block(&y, &w, 0.0, &mut Mode::Eval).unwrap();
            }
            prop_assert!(y.value().bitwise_eq(&x), "{variant}");
        }
    }

    #[test]
    fn feature_ff_commutes_with_token_permutations(seed in 0u64..1000, perm in Just((0..7).collect::<Vec<usize>>()).prop_shuffle()) {
        let tape = Tape::no_grad();
        let f = ff(&tape, 5, 12, seed);
        let x = random::<f64>(&[2, 7, 5], seed + 10);
        let run = |x: &Tensor<f64>| feature_ff(&tape.constant(x), &f, 0.0, &mut Mode::Eval).unwrap().value();
        let lhs = run(&permute_tokens(&x, &perm));
        let rhs = permute_tokens(&run(&x), &perm);
        prop_assert!(lhs.bitwise_eq(&rhs));
    }

    #[test]
    fn attention_commutes_with_token_permutations(seed in 0u64..1000, perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle()) {
        let tape = Tape::no_grad();
        let c = |s: &[usize], k: u64| tape.constant(&random::<f64>(s, seed + k));
        let attn = Attention {
            wq: c(&[4, 4], 1), bq: c(&[4], 2), wk: c(&[4, 4], 3), bk: c(&[4], 4),
            wv: c(&[4, 4], 5), bv: c(&[4], 6), wo: c(&[4, 4], 7), bo: c(&[4], 8),
            heads: 2,
        };
        let x = random::<f64>(&[1, 6, 4], seed);
        let run = |x: &Tensor<f64>| attn.apply(&tape.constant(x)).unwrap().value();
        let lhs = run(&permute_tokens(&x, &perm));
        let rhs = permute_tokens(&run(&x), &perm);
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }
}

#[test]
fn token_ff_is_not_permutation_equivariant() {
    let tape = Tape::no_grad();
    let f = ff(&tape, 4, 8, 3);
    let x = random::<f64>(&[1, 4, 3], 4);
    let perm = [1, 0, 2, 3];
    let run = |x: &Tensor<f64>| {
        token_ff(&tape.constant(x), &f, 0.0, &mut Mode::Eval)
            .unwrap()
            .value()
    };
    let lhs = run(&permute_tokens(&x, &perm));
    let rhs = permute_tokens(&run(&x), &perm);
    assert!(lhs.max_abs_diff(&rhs).unwrap() > 1e-3);
}

#[test]
fn token_ff_on_large_inputs_sums_tokens() {
    // with w1 = I, w2 = ones and inputs far above zero, gelu is the identity
    // to within 1.3e-4 per unit, so each output is the token sum
    let tape = Tape::no_grad();
    let f = FeedForward {
        w1: tape.constant(&Tensor::eye(2)),
        b1: tape.constant(&Tensor::zeros(&[2])),
        w2: tape.constant(&Tensor::ones(&[2, 2])),
        b2: tape.constant(&Tensor::zeros(&[2])),
    };
    for (a, b) in [(4.0, 4.0), (5.0, 9.0), (12.5, 7.0)] {
        let x = Tensor::from_f64(&[1, 2, 1], &[a, b]).unwrap();
        let y = token_ff(&tape.constant(&x), &f, 0.0, &mut Mode::Eval)
            .unwrap()
            .value();
        for v in y.data() {
            assert!((v - (a + b)).abs() < 1e-3, "{a} {b} {v}");
        }
    }
}

#[test]
#[allow(clippy::excessive_precision)]
fn feature_ff_frozen_values() {
    // gelu(3) = 2.99595030590510972 (mpmath)
    let tape = Tape::no_grad();
    let x = tape.constant(&Tensor::full(&[1, 1, 2], 3.0));
    let make = |w2: Tensor<f64>| FeedForward {
        w1: tape.constant(&Tensor::eye(2)),
        b1: tape.constant(&Tensor::zeros(&[2])),
        w2: tape.constant(&w2),
        b2: tape.constant(&Tensor::zeros(&[2])),
    };
    let y = feature_ff(&x, &make(Tensor::eye(2)), 0.0, &mut Mode::Eval)
        .unwrap()
        .value();
    for v in y.data() {
        assert!((v - 2.995_950_305_905_109_7).abs() < 1e-12);
    }
    let y = feature_ff(&x, &make(Tensor::ones(&[2, 2])), 0.0, &mut Mode::Eval)
        .unwrap()
        .value();
    for v in y.data() {
        assert!((v - 5.991_900_611_810_219_4).abs() < 1e-12);
    }
}

#[test]
fn wrong_sequence_length_is_rejected() {
    let tape = Tape::no_grad();
    let f = ff(&tape, 5, 8, 0);
    let x = tape.constant(&random::<f64>(&[1, 6, 3], 1));
    let err = token_ff(&x, &f, 0.0, &mut Mode::Eval).unwrap_err();
    assert!(
        matches!(
            err,
            Error::FixedSequenceLength {
                expected: 5,
                got: 6
            }
        ),
        "{err}"
    );

    for variant in [Variant::FfOnly, Variant::AttentionOnly] {
        let config = reduced(variant);
        let params = init_params::<f32>(&config, 0).unwrap();
        let tape = Tape::no_grad();
        let bound = params.bind(&tape);
        let w = BlockWeights::bind(&bound, &config, 0).unwrap();
        let x = tape.constant(&random::<f32>(&[1, config.num_tokens() + 1, config.dim], 2));
        let err = block(&x, &w, 0.0, &mut Mode::Eval).unwrap_err();
        assert!(
            matches!(
                err,
                Error::FixedSequenceLength {
                    expected: 17,
                    got: 18
                }
            ),
            "{variant}: {err}"
        );
    }

    // attention alone has no fixed length
    let config = reduced(Variant::AttentionBaseline);
    let params = init_params::<f32>(&config, 0).unwrap();
    let tape = Tape::no_grad();
    let bound = params.bind(&tape);
    let w = BlockWeights::bind(&bound, &config, 0).unwrap();
    let x = tape.constant(&random::<f32>(&[1, 30, config.dim], 2));
    assert_eq!(
        block(&x, &w, 0.0, &mut Mode::Eval).unwrap().shape(),
        vec![1, 30, 16]
    );
}

#[test]
fn wrong_image_size_is_a_shape_error() {
    let config = reduced(Variant::FfOnly);
    let params = init_params::<f32>(&config, 0).unwrap();
    let err = predict(&params, &config, &Tensor::zeros(&[1, 3, 40, 40])).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }), "{err}");
}

#[test]
fn attention_matches_hand_computation() {
    // independent NumPy evaluation of softmax(QKᵀ/√2)·V·Wo + bo
    let expected: [f64; 4] = [
        3.274833238050147,
        5.486869515504425,
        0.002437734353091872,
        3.7795327309668307,
    ];
    let tape = Tape::no_grad();
    let c = |s: &[usize], v: &[f64]| tape.constant(&Tensor::from_f64(s, v).unwrap());
    let attn = Attention {
        wq: c(&[2, 2], &[0.5, -1.0, 1.0, 0.25]),
        bq: c(&[2], &[0.1, -0.2]),
        wk: c(&[2, 2], &[1.0, 0.0, 0.5, -0.5]),
        bk: c(&[2], &[0.0, 0.3]),
        wv: c(&[2, 2], &[2.0, 1.0, 0.0, 1.0]),
        bv: c(&[2], &[-0.5, 0.5]),
        wo: c(&[2, 2], &[1.0, -1.0, 0.5, 2.0]),
        bo: c(&[2], &[0.05, 0.0]),
        heads: 1,
    };
    let x = c(&[1, 2, 2], &[1.0, 2.0, -1.0, 0.5]);
    let y = attn.apply(&x).unwrap().value();
    for (a, b) in y.data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn logits_do_not_depend_on_batch_composition() {
    for variant in VARIANTS {
        let config = reduced(variant);
        let params = init_params::<f32>(&config, 9).unwrap();
        let images = random::<f32>(&[4, 3, 32, 32], 10);
        let all = predict(&params, &config, &images).unwrap();
        for i in 0..4 {
            let one = Tensor::from_vec(
                &[1, 3, 32, 32],
                images.data()[i * 3072..(i + 1) * 3072].to_vec(),
            )
            .unwrap();
            let single = predict(&params, &config, &one).unwrap();
            for (a, b) in single.data().iter().zip(&all.data()[i * 10..(i + 1) * 10]) {
                assert!((a - b).abs() < 1e-5, "{variant} sample {i}");
            }
        }
    }
}

#[test]
fn eval_forward_is_bitwise_repeatable() {
    let config = reduced(Variant::FfOnly);
    let params = init_params::<f32>(&config, 1).unwrap();
    let images = random::<f32>(&[3, 3, 32, 32], 2);
    let a = predict(&params, &config, &images).unwrap();
    let b = predict(&params, &config, &images).unwrap();
    assert!(a.bitwise_eq(&b));
}

#[test]
fn train_mode_dropout_changes_logits() {
    let mut config = reduced(Variant::FfOnly);
    config.dropout = 0.5;
    let params = init_params::<f32>(&config, 1).unwrap();
    let images = random::<f32>(&[2, 3, 32, 32], 2);
    let tape = Tape::no_grad();
    let bound = params.bind(&tape);
    let x = tape.constant(&images);
    let mut rng = <ffvit::TrainRng as rand::SeedableRng>::seed_from_u64(0);
    let train = model_forward(&x, &bound, &config, &mut Mode::Train(&mut rng))
        .unwrap()
        .value();
    let eval = predict(&params, &config, &images).unwrap();
    assert!(train.max_abs_diff(&eval).unwrap() > 0.0);
}

#[test]
fn initial_loss_is_near_uniform() {
    let ln10 = 10f64.ln();
    for variant in VARIANTS {
        let config = reduced(variant);
        for seed in 0..10 {
            let params = init_params::<f32>(&config, seed).unwrap();
            let images = random::<f32>(&[16, 3, 32, 32], 100 + seed);
            let labels: Vec<usize> = (0..16).map(|i| i % 10).collect();
            let tape = Tape::no_grad();
            let bound = params.bind(&tape);
            let logits =
                model_forward(&tape.constant(&images), &bound, &config, &mut Mode::Eval).unwrap();
            let loss = f64::from(logits.cross_entropy_logits(&labels).unwrap().value().item());
            assert!((loss - ln10).abs() < 1.0, "{variant} seed {seed}: {loss}");
        }
    }
}

#[test]
fn preset_forward_shapes() {
    for (preset, batch) in [(Preset::Tiny, 2), (Preset::Base, 4)] {
        let config = preset.config();
        let params = init_params::<f32>(&config, 0).unwrap();
        let images = random::<f32>(&[batch, 3, 224, 224], 1);
        let logits = predict(&params, &config, &images).unwrap();
        assert_eq!(logits.shape(), &[batch, 1000]);
        assert!(logits.all_finite());
    }
}
