//! The three block variants and their sub-layers.
//!
//! Every block is pre-norm with residuals and maps `[B, N, D]` to `[B, N, D]`.
//! Mixing over tokens is done by transposing to `[B, D, N]`, applying the
//! layer along the last axis, and transposing back.

use crate::error::{Error, Result};
use crate::rng::TrainRng;
use crate::tensor::{Scalar, Var};

use super::config::{ModelConfig, Variant, LAYER_NORM_EPS};
use super::params::BoundParams;

/// Forward-pass mode. Dropout only fires in `Train`.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut TrainRng),
}

impl Mode<'_> {
    pub fn dropout<'t, T: Scalar>(&mut self, x: Var<'t, T>, p: f64) -> Var<'t, T> {
        match self {
            Mode::Eval => x,
            Mode::Train(rng) => x.dropout(p, &mut **rng),
        }
    }
}

#[derive(Clone, Copy)]
pub struct Norm<'t, T> {
    pub gamma: Var<'t, T>,
    pub beta: Var<'t, T>,
}

impl<'t, T: Scalar> Norm<'t, T> {
    pub fn bind(params: &BoundParams<'t, T>, prefix: &str) -> Result<Self> {
        Ok(Self {
            gamma: params.get(&format!("{prefix}.gamma"))?,
            beta: params.get(&format!("{prefix}.beta"))?,
        })
    }

    pub fn apply(&self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(&self.gamma, &self.beta, T::of(LAYER_NORM_EPS))
    }
}

/// Two-layer perceptron `w2·drop(gelu(w1·x + b1)) + b2` along the last axis.
#[derive(Clone, Copy)]
pub struct FeedForward<'t, T> {
    pub w1: Var<'t, T>,
    pub b1: Var<'t, T>,
    pub w2: Var<'t, T>,
    pub b2: Var<'t, T>,
}

impl<'t, T: Scalar> FeedForward<'t, T> {
    pub fn bind(params: &BoundParams<'t, T>, prefix: &str) -> Result<Self> {
        let get = |k: &str| params.get(&format!("{prefix}.{k}"));
        Ok(Self {
            w1: get("w1")?,
            b1: get("b1")?,
            w2: get("w2")?,
            b2: get("b2")?,
        })
    }

    pub fn input_width(&self) -> usize {
        self.w1.shape()[0]
    }

    fn apply(&self, x: &Var<'t, T>, dropout: f64, mode: &mut Mode<'_>) -> Result<Var<'t, T>> {
        let h = x.matmul(&self.w1)?.add_bias(&self.b1)?.gelu();
        let h = mode.dropout(h, dropout);
        let y = h.matmul(&self.w2)?.add_bias(&self.b2)?;
        Ok(mode.dropout(y, dropout))
    }
}

/// Multi-head scaled dot-product self-attention along the second-to-last axis.
#[derive(Clone, Copy)]
pub struct Attention<'t, T> {
    pub wq: Var<'t, T>,
    pub bq: Var<'t, T>,
    pub wk: Var<'t, T>,
    pub bk: Var<'t, T>,
    pub wv: Var<'t, T>,
    pub bv: Var<'t, T>,
    pub wo: Var<'t, T>,
    pub bo: Var<'t, T>,
    pub heads: usize,
}

impl<'t, T: Scalar> Attention<'t, T> {
    pub fn bind(params: &BoundParams<'t, T>, prefix: &str, heads: usize) -> Result<Self> {
        let get = |k: &str| params.get(&format!("{prefix}.{k}"));
        Ok(Self {
            wq: get("wq")?,
            bq: get("bq")?,
            wk: get("wk")?,
            bk: get("bk")?,
            wv: get("wv")?,
            bv: get("bv")?,
            wo: get("wo")?,
            bo: get("bo")?,
            heads,
        })
    }

    pub fn width(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn apply(&self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        let [b, n, e] = s[..] else {
            return Err(Error::Rank {
                op: "attention",
                min: 3,
                shape: s,
            });
        };
        if e % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {e} is not divisible by {} heads",
                self.heads
            )));
        }
        let dh = e / self.heads;
        let split = |w: &Var<'t, T>, bias: &Var<'t, T>| -> Result<Var<'t, T>> {
            x.matmul(w)?
                .add_bias(bias)?
                .reshape(&[b, n, self.heads, dh])?
                .permute(&[0, 2, 1, 3])
        };
        let q = split(&self.wq, &self.bq)?;
        let k = split(&self.wk, &self.bk)?.transpose_last_two()?;
        let v = split(&self.wv, &self.bv)?;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let weights = q.matmul(&k)?.mul_scalar(scale).softmax_last();
        let mixed = weights
            .matmul(&v)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, n, e])?;
        mixed.matmul(&self.wo)?.add_bias(&self.bo)
    }
}

fn expect_rank3<T: Scalar>(x: &Var<'_, T>, op: &'static str) -> Result<[usize; 3]> {
    match x.shape()[..] {
        [b, n, d] => Ok([b, n, d]),
        _ => Err(Error::Rank {
            op,
            min: 3,
            shape: x.shape(),
        }),
    }
}

/// Feed-forward over the token axis. The weight shapes fix the sequence length.
pub fn token_ff<'t, T: Scalar>(
    x: &Var<'t, T>,
    ff: &FeedForward<'t, T>,
    dropout: f64,
    mode: &mut Mode<'_>,
) -> Result<Var<'t, T>> {
    let [_, n, _] = expect_rank3(x, "token_ff")?;
    if n != ff.input_width() {
        return Err(Error::FixedSequenceLength {
            expected: ff.input_width(),
            got: n,
        });
    }
    ff.apply(&x.transpose_last_two()?, dropout, mode)?
        .transpose_last_two()
}

/// Feed-forward applied independently to every token.
pub fn feature_ff<'t, T: Scalar>(
    x: &Var<'t, T>,
    ff: &FeedForward<'t, T>,
    dropout: f64,
    mode: &mut Mode<'_>,
) -> Result<Var<'t, T>> {
    let [_, _, d] = expect_rank3(x, "feature_ff")?;
    if d != ff.input_width() {
        return Err(Error::shape(
            "feature_ff",
            format!(
                "feature width {d} does not match weights for {}",
                ff.input_width()
            ),
        ));
    }
    ff.apply(x, dropout, mode)
}

pub enum TokenMixer<'t, T> {
    FeedForward(FeedForward<'t, T>),
    Attention(Attention<'t, T>),
}

pub enum FeatureMixer<'t, T> {
    FeedForward(FeedForward<'t, T>),
    Attention(Attention<'t, T>),
}

pub struct BlockWeights<'t, T> {
    pub norm1: Norm<'t, T>,
    pub token_mixer: TokenMixer<'t, T>,
    pub norm2: Norm<'t, T>,
    pub feature_mixer: FeatureMixer<'t, T>,
}

impl<'t, T: Scalar> BlockWeights<'t, T> {
    pub fn bind(params: &BoundParams<'t, T>, config: &ModelConfig, index: usize) -> Result<Self> {
        let p = format!("block.{index}");
        let token_mixer = match config.variant {
            Variant::FfOnly => {
                TokenMixer::FeedForward(FeedForward::bind(params, &format!("{p}.token_ff"))?)
            }
            _ => {
                TokenMixer::Attention(Attention::bind(params, &format!("{p}.attn"), config.heads)?)
            }
        };
        let feature_mixer = match config.variant {
            Variant::AttentionOnly => {
                // the token axis (length N, prime for every preset) is the
                // embedding here, so a single head is used
                FeatureMixer::Attention(Attention::bind(params, &format!("{p}.feature_attn"), 1)?)
            }
            _ => FeatureMixer::FeedForward(FeedForward::bind(params, &format!("{p}.feature_ff"))?),
        };
        Ok(Self {
            norm1: Norm::bind(params, &format!("{p}.norm1"))?,
            token_mixer,
            norm2: Norm::bind(params, &format!("{p}.norm2"))?,
            feature_mixer,
        })
    }
}

fn residual<'t, T: Scalar>(
    x: &Var<'t, T>,
    f: impl FnOnce(&Var<'t, T>) -> Result<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    x.add(&f(x)?)
}

/// `x + token_ff(LN(x))`, then `x + feature_ff(LN(x))`.
pub fn linear_block<'t, T: Scalar>(
    x: &Var<'t, T>,
    norm1: &Norm<'t, T>,
    token: &FeedForward<'t, T>,
    norm2: &Norm<'t, T>,
    feature: &FeedForward<'t, T>,
    dropout: f64,
    mode: &mut Mode<'_>,
) -> Result<Var<'t, T>> {
    let x = residual(x, |x| token_ff(&norm1.apply(x)?, token, dropout, mode))?;
    residual(&x, |x| feature_ff(&norm2.apply(x)?, feature, dropout, mode))
}

/// `x + MHSA(LN(x))`, then `x + feature_ff(LN(x))`.
pub fn attention_block<'t, T: Scalar>(
    x: &Var<'t, T>,
    norm1: &Norm<'t, T>,
    attn: &Attention<'t, T>,
    norm2: &Norm<'t, T>,
    feature: &FeedForward<'t, T>,
    dropout: f64,
    mode: &mut Mode<'_>,
) -> Result<Var<'t, T>> {
    let x = residual(x, |x| attn.apply(&norm1.apply(x)?))?;
    residual(&x, |x| feature_ff(&norm2.apply(x)?, feature, dropout, mode))
}

/// `x + MHSA(LN(x))`, then `x + (attention over the feature axis)(LN(x))`.
pub fn attention_over_features_block<'t, T: Scalar>(
    x: &Var<'t, T>,
    norm1: &Norm<'t, T>,
    attn: &Attention<'t, T>,
    norm2: &Norm<'t, T>,
    feature_attn: &Attention<'t, T>,
) -> Result<Var<'t, T>> {
    let [_, n, _] = expect_rank3(x, "attention_over_features")?;
    if n != feature_attn.width() {
        return Err(Error::FixedSequenceLength {
            expected: feature_attn.width(),
            got: n,
        });
    }
    let x = residual(x, |x| attn.apply(&norm1.apply(x)?))?;
    residual(&x, |x| {
        feature_attn
            .apply(&norm2.apply(x)?.transpose_last_two()?)?
            .transpose_last_two()
    })
}

/// Dispatches to the block matching the bound weights.
pub fn block<'t, T: Scalar>(
    x: &Var<'t, T>,
    w: &BlockWeights<'t, T>,
    dropout: f64,
    mode: &mut Mode<'_>,
) -> Result<Var<'t, T>> {
    match (&w.token_mixer, &w.feature_mixer) {
        (TokenMixer::FeedForward(t), FeatureMixer::FeedForward(f)) => {
            linear_block(x, &w.norm1, t, &w.norm2, f, dropout, mode)
        }
        (TokenMixer::Attention(a), FeatureMixer::FeedForward(f)) => {
            attention_block(x, &w.norm1, a, &w.norm2, f, dropout, mode)
        }
        (TokenMixer::Attention(a), FeatureMixer::Attention(fa)) => {
            attention_over_features_block(x, &w.norm1, a, &w.norm2, fa)
        }
        (TokenMixer::FeedForward(_), FeatureMixer::Attention(_)) => Err(Error::Config(
            "feed-forward token mixing with feature attention is not a supported variant".into(),
        )),
    }
}
