use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which mixing layers a block uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Feed-forward over tokens, then feed-forward over features.
    FfOnly,
    /// Multi-head self-attention over tokens, then feed-forward over features.
    AttentionBaseline,
    /// Attention over tokens, then attention over features.
    AttentionOnly,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::FfOnly => "ff_only",
            Variant::AttentionBaseline => "attention_baseline",
            Variant::AttentionOnly => "attention_only",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ff_only" => Ok(Variant::FfOnly),
            "attention_baseline" => Ok(Variant::AttentionBaseline),
            "attention_only" => Ok(Variant::AttentionOnly),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    Tiny,
    Base,
    Large,
    /// Desk-scale geometry for tests: 32px images, 8px patches, width 16, depth 2.
    Reduced,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Tiny, Preset::Base, Preset::Large, Preset::Reduced];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Tiny => "tiny",
            Preset::Base => "base",
            Preset::Large => "large",
            Preset::Reduced => "reduced",
        }
    }

    /// Reference parameter count of the feed-forward-only model at this size.
    pub fn reference_params(self) -> Option<u64> {
        match self {
            Preset::Tiny => Some(7_700_000),
            Preset::Base => Some(62_000_000),
            Preset::Large => Some(206_000_000),
            Preset::Reduced => None,
        }
    }

    pub fn config(self) -> ModelConfig {
        let (image_size, patch_size, dim, depth, heads, num_classes): (
            usize,
            usize,
            usize,
            usize,
            usize,
            usize,
        ) = match self {
            Preset::Tiny => (224, 16, 192, 12, 3, 1000),
            Preset::Base => (224, 16, 768, 12, 12, 1000),
            Preset::Large => (224, 32, 1024, 24, 16, 1000),
            Preset::Reduced => (32, 8, 16, 2, 2, 10),
        };
        let tokens = (image_size / patch_size).pow(2) + 1;
        ModelConfig {
            image_size,
            patch_size,
            channels: 3,
            dim,
            depth,
            feature_expansion: 4,
            token_hidden: 4 * tokens,
            num_classes,
            heads,
            variant: Variant::FfOnly,
            dropout: 0.0,
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?}")))
    }
}

pub fn build_preset(name: &str) -> Result<ModelConfig> {
    Ok(name.parse::<Preset>()?.config())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub dim: usize,
    pub depth: usize,
    /// Feature feed-forward hidden width is `feature_expansion * dim`.
    pub feature_expansion: usize,
    /// Absolute hidden width of the token feed-forward.
    pub token_hidden: usize,
    pub num_classes: usize,
    /// Attention heads over tokens; unused by [`Variant::FfOnly`].
    pub heads: usize,
    pub variant: Variant,
    pub dropout: f64,
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

impl ModelConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch tokens plus the class token.
    pub fn num_tokens(&self) -> usize {
        self.grid().pow(2) + 1
    }

    pub fn patch_features(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn feature_hidden(&self) -> usize {
        self.feature_expansion * self.dim
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("dim", self.dim),
            ("depth", self.depth),
            ("feature_expansion", self.feature_expansion),
            ("token_hidden", self.token_hidden),
            ("num_classes", self.num_classes),
            ("heads", self.heads),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.variant != Variant::FfOnly && !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    /// Canonical `key=value` pairs, keys sorted.
    pub fn to_pairs(&self) -> BTreeMap<&'static str, String> {
        BTreeMap::from([
            ("channels", self.channels.to_string()),
            ("depth", self.depth.to_string()),
            ("dim", self.dim.to_string()),
            ("dropout", self.dropout.to_string()),
            ("feature_expansion", self.feature_expansion.to_string()),
            ("heads", self.heads.to_string()),
            ("image_size", self.image_size.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("token_hidden", self.token_hidden.to_string()),
            ("variant", self.variant.to_string()),
        ])
    }

    /// Applies one `key=value` setting; returns `false` for keys this type does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = || Error::Config(format!("invalid value {value:?} for {key}"));
        let int = || value.parse::<usize>().map_err(|_| bad());
        match key {
            "image_size" => self.image_size = int()?,
            "patch_size" => self.patch_size = int()?,
            "channels" => self.channels = int()?,
            "dim" => self.dim = int()?,
            "depth" => self.depth = int()?,
            "feature_expansion" => self.feature_expansion = int()?,
            "token_hidden" => self.token_hidden = int()?,
            "num_classes" => self.num_classes = int()?,
            "heads" => self.heads = int()?,
            "variant" => self.variant = value.parse()?,
            "dropout" => self.dropout = value.parse().map_err(|_| bad())?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// How a parameter tensor is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    TruncNormal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn spec(name: String, shape: Vec<usize>, init: Init) -> ParamSpec {
    ParamSpec { name, shape, init }
}

fn linear(out: &mut Vec<ParamSpec>, prefix: &str, w: &str, b: &str, fan_in: usize, fan_out: usize) {
    out.push(spec(
        format!("{prefix}.{w}"),
        vec![fan_in, fan_out],
        Init::TruncNormal,
    ));
    out.push(spec(format!("{prefix}.{b}"), vec![fan_out], Init::Zeros));
}

fn norm(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    out.push(spec(format!("{prefix}.gamma"), vec![d], Init::Ones));
    out.push(spec(format!("{prefix}.beta"), vec![d], Init::Zeros));
}

fn attention(out: &mut Vec<ParamSpec>, prefix: &str, width: usize) {
    for (w, b) in [("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")] {
        linear(out, prefix, w, b, width, width);
    }
}

fn feed_forward(out: &mut Vec<ParamSpec>, prefix: &str, width: usize, hidden: usize) {
    linear(out, prefix, "w1", "b1", width, hidden);
    linear(out, prefix, "w2", "b2", hidden, width);
}

/// Every learnable tensor of `config`, in canonical order.
pub fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let (d, n) = (config.dim, config.num_tokens());
    let mut out = Vec::new();
    linear(
        &mut out,
        "patch_embed",
        "weight",
        "bias",
        config.patch_features(),
        d,
    );
    out.push(spec("cls_token".into(), vec![d], Init::TruncNormal));
    out.push(spec("pos_embed".into(), vec![n, d], Init::TruncNormal));
    for i in 0..config.depth {
        let p = format!("block.{i}");
        norm(&mut out, &format!("{p}.norm1"), d);
        match config.variant {
            Variant::FfOnly => {
                feed_forward(&mut out, &format!("{p}.token_ff"), n, config.token_hidden)
            }
            Variant::AttentionBaseline | Variant::AttentionOnly => {
                attention(&mut out, &format!("{p}.attn"), d)
            }
        }
        norm(&mut out, &format!("{p}.norm2"), d);
        match config.variant {
            Variant::FfOnly | Variant::AttentionBaseline => feed_forward(
                &mut out,
                &format!("{p}.feature_ff"),
                d,
                config.feature_hidden(),
            ),
            Variant::AttentionOnly => attention(&mut out, &format!("{p}.feature_attn"), n),
        }
    }
    norm(&mut out, "norm", d);
    linear(&mut out, "head", "weight", "bias", d, config.num_classes);
    out
}

/// Exact learnable element count, from the closed-form per-component sizes.
pub fn param_count(config: &ModelConfig) -> u64 {
    let c = |v: usize| v as u64;
    let (d, n, t) = (
        c(config.dim),
        c(config.num_tokens()),
        c(config.token_hidden),
    );
    let f = c(config.feature_hidden());
    let embed = c(config.patch_features()) * d + d + d + n * d;
    let attn = |w: u64| 4 * (w * w + w);
    let token_mix = match config.variant {
        Variant::FfOnly => n * t + t + t * n + n,
        _ => attn(d),
    };
    let feature_mix = match config.variant {
        Variant::AttentionOnly => attn(n),
        _ => d * f + f + f * d + d,
    };
    let block = token_mix + feature_mix + 4 * d;
    let head = 2 * d + d * c(config.num_classes) + c(config.num_classes);
    embed + c(config.depth) * block + head
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_geometry() {
        let tiny = build_preset("tiny").unwrap();
        assert_eq!((tiny.num_tokens(), tiny.token_hidden), (197, 788));
        let large = build_preset("large").unwrap();
        assert_eq!((large.num_tokens(), large.token_hidden), (50, 200));
        let base = build_preset("base").unwrap();
        assert_eq!((base.dim, base.depth, base.patch_size), (768, 12, 16));
        assert!(matches!(build_preset("huge"), Err(Error::Config(_))));
        for p in Preset::ALL {
            p.config().validate().unwrap();
        }
    }

    #[test]
    fn validation_errors() {
        let mut c = Preset::Reduced.config();
        c.image_size = 30;
        assert!(c.validate().is_err());
        let mut c = Preset::Reduced
            .config()
            .with_variant(Variant::AttentionBaseline);
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = Preset::Reduced.config();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn pairs_roundtrip_through_set() {
        let mut c = Preset::Base.config().with_variant(Variant::AttentionOnly);
        c.dropout = 0.125;
        let mut d = Preset::Reduced.config();
        for (k, v) in c.to_pairs() {
            assert!(d.set(k, &v).unwrap());
        }
        assert_eq!(c, d);
        assert!(!d.set("epochs", "3").unwrap());
        assert!(d.set("dim", "x").is_err());
    }
}
