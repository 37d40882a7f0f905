use ffvit::model::{init_params, param_count, param_specs, ModelConfig};
use ffvit::{Preset, Variant};
use proptest::prelude::*;

/// Counts frozen from an independent enumeration of every weight matrix
/// and bias in the architecture.
const FROZEN: [(Preset, Variant, u64); 12] = [
    (Preset::Tiny, Variant::FfOnly, 7_676_212),
    (Preset::Tiny, Variant::AttentionBaseline, 5_717_416),
    (Preset::Tiny, Variant::AttentionOnly, 4_039_240),
    (Preset::Base, Variant::FfOnly, 61_956_724),
    (Preset::Base, Variant::AttentionBaseline, 86_567_656),
    (Preset::Base, Variant::AttentionOnly, 31_770_760),
    (Preset::Large, Variant::FfOnly, 206_259_800),
    (Preset::Large, Variant::AttentionBaseline, 306_535_400),
    (Preset::Large, Variant::AttentionOnly, 105_330_728),
    (Preset::Reduced, Variant::FfOnly, 12_756),
    (Preset::Reduced, Variant::AttentionBaseline, 10_138),
    (Preset::Reduced, Variant::AttentionOnly, 8_330),
];

fn enumerated(config: &ModelConfig) -> u64 {
    param_specs(config)
        .iter()
        .map(|s| s.shape.iter().product::<usize>() as u64)
        .sum()
}

#[test]
fn frozen_counts() {
    for (preset, variant, expected) in FROZEN {
        let config = preset.config().with_variant(variant);
        assert_eq!(param_count(&config), expected, "{preset:?} {variant}");
        assert_eq!(enumerated(&config), expected, "{preset:?} {variant}");
    }
}

#[test]
fn reference_sizes_within_two_percent() {
    for preset in [Preset::Tiny, Preset::Base, Preset::Large] {
        let reference = preset.reference_params().unwrap() as f64;
        let count = param_count(&preset.config()) as f64;
        assert!(
            (count - reference).abs() / reference < 0.02,
            "{preset:?}: {count}"
        );
    }
}

#[test]
fn attention_variants_near_reference_sizes() {
    // 5.7M / 86M / 306M attention baselines, about 4.0M attention-only tiny
    let close = |p: Preset, v: Variant, r: f64| {
        let c = param_count(&p.config().with_variant(v)) as f64;
        (c - r).abs() / r < 0.02
    };
    assert!(close(Preset::Tiny, Variant::AttentionBaseline, 5.7e6));
    assert!(close(Preset::Base, Variant::AttentionBaseline, 86e6));
    assert!(close(Preset::Large, Variant::AttentionBaseline, 306e6));
    assert!(close(Preset::Tiny, Variant::AttentionOnly, 4.0e6));
}

#[test]
fn initialized_set_matches_specs() {
    for variant in [
        Variant::FfOnly,
        Variant::AttentionBaseline,
        Variant::AttentionOnly,
    ] {
        let config = Preset::Reduced.config().with_variant(variant);
        let params = init_params::<f32>(&config, 0).unwrap();
        assert_eq!(params.numel(), param_count(&config));
        params.check_against(&config).unwrap();
    }
}

fn arb_config() -> impl Strategy<Value = ModelConfig> {
    (
        1usize..5,
        1usize..5,
        1usize..4,
        1usize..4,
        1usize..4,
        1usize..4,
        2usize..20,
        0usize..3,
    )
        .prop_map(
            |(patch, grid, heads, dim_mult, depth, expansion, classes, variant)| {
                let mut c = Preset::Reduced.config();
                c.patch_size = patch;
                c.image_size = patch * grid;
                c.heads = heads;
                c.dim = heads * dim_mult;
                c.depth = depth;
                c.feature_expansion = expansion;
                c.token_hidden = 2 * c.num_tokens() + 1;
                c.num_classes = classes;
                c.with_variant(
                    [
                        Variant::FfOnly,
                        Variant::AttentionBaseline,
                        Variant::AttentionOnly,
                    ][variant],
                )
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn closed_form_equals_enumeration(config in arb_config()) {
        config.validate().unwrap();
        prop_assert_eq!(param_count(&config), enumerated(&config));
        let params = init_params::<f32>(&config, 1).unwrap();
        prop_assert_eq!(params.numel(), param_count(&config));
    }
}
