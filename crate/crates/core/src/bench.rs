//! Sequence-length scaling of a single block's forward pass.
//!
//! The token feed-forward costs `O(N·h)` per feature, so with a fixed hidden
//! width it is linear in `N`; attention builds an `N × N` score matrix and
//! is quadratic. [`measure_forward`] times one block at batch 1 over a range
//! of `N` and fits the exponent of `time ∝ N^α`.

use std::fmt;
use std::str::FromStr;
use std::sync::Once;
use std::time::Instant;

use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::model::{attention_block, linear_block, Attention, FeedForward, Mode, Norm};
use crate::rng::TrainRng;
use crate::tensor::{Tape, Tensor, Var};

pub const CSV_HEADER: &str = "variant,N,median_seconds,alpha";
pub const DEFAULT_HIDDEN: usize = 256;
/// Refuse runs whose combined estimated footprint exceeds this.
pub const DEFAULT_MEMORY_LIMIT: usize = 3 << 30;
pub const DEFAULT_MIN_SAMPLE_SECONDS: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchVariant {
    FfFixedHidden,
    FfProportionalHidden,
    AttentionBaseline,
}

impl BenchVariant {
    pub const ALL: [BenchVariant; 3] = [
        BenchVariant::FfFixedHidden,
        BenchVariant::FfProportionalHidden,
        BenchVariant::AttentionBaseline,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BenchVariant::FfFixedHidden => "ff_fixed_hidden",
            BenchVariant::FfProportionalHidden => "ff_proportional_hidden",
            BenchVariant::AttentionBaseline => "attention_baseline",
        }
    }

    /// Token feed-forward hidden width at sequence length `n`.
    pub fn token_hidden(self, n: usize, fixed: usize) -> usize {
        match self {
            BenchVariant::FfProportionalHidden => 4 * n,
            _ => fixed,
        }
    }
}

impl fmt::Display for BenchVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown bench variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSpec {
    pub variant: BenchVariant,
    pub lengths: Vec<usize>,
    pub dim: usize,
    /// Token hidden width for `ff_fixed_hidden`.
    pub hidden: usize,
    pub repetitions: usize,
    pub warmup: usize,
    /// Each sample repeats the forward pass until it spans at least this
    /// long, then reports the per-pass time.
    pub min_sample_seconds: f64,
    pub memory_limit: usize,
    pub seed: u64,
}

impl BenchSpec {
    pub fn new(variant: BenchVariant, lengths: Vec<usize>, dim: usize) -> Self {
        Self {
            variant,
            lengths,
            dim,
            hidden: DEFAULT_HIDDEN,
            repetitions: 5,
            warmup: 1,
            min_sample_seconds: DEFAULT_MIN_SAMPLE_SECONDS,
            memory_limit: DEFAULT_MEMORY_LIMIT,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengths.len() < 2 {
            return Err(Error::Config("need at least two sequence lengths".into()));
        }
        if self.lengths[0] == 0 || self.lengths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "sequence lengths {:?} must be positive and strictly increasing",
                self.lengths
            )));
        }
        if self.repetitions < 3 {
            return Err(Error::Config("repetitions must be at least 3".into()));
        }
        if !(self.min_sample_seconds >= 0.0 && self.min_sample_seconds.is_finite()) {
            return Err(Error::Config(format!(
                "min_sample_seconds {} must be finite and non-negative",
                self.min_sample_seconds
            )));
        }
        if self.dim == 0 || self.hidden == 0 {
            return Err(Error::Config("dim and hidden must be positive".into()));
        }
        Ok(())
    }

    /// Rough peak footprint in bytes of one forward pass at length `n`.
    pub fn estimated_bytes(&self, n: usize) -> usize {
        let d = self.dim;
        let h = self.variant.token_hidden(n, self.hidden);
        let feature = 2 * 4 * d * d + 4 * 4 * n * d;
        let elems = match self.variant {
            BenchVariant::AttentionBaseline => 4 * d * d + 3 * n * n + 8 * n * d,
            _ => 2 * n * h + 3 * d * h + 8 * n * d,
        };
        (elems + feature).saturating_mul(4)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingReport {
    pub variant: BenchVariant,
    pub lengths: Vec<usize>,
    pub medians: Vec<f64>,
    pub alpha: f64,
    /// Timed repetitions per length, in seconds.
    pub samples: Vec<Vec<f64>>,
}

impl ScalingReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for (n, m) in self.lengths.iter().zip(&self.medians) {
            s.push_str(&format!("{},{n},{m},{}\n", self.variant, self.alpha));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub variant: BenchVariant,
    pub n: usize,
    pub median_seconds: f64,
    pub alpha: f64,
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Config(format!(
            "bench CSV must start with {CSV_HEADER:?}"
        )));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let bad = || Error::Config(format!("malformed bench CSV row {line:?}"));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(CsvRow {
                variant: f[0].parse()?,
                n: f[1].parse().map_err(|_| bad())?,
                median_seconds: f[2].parse().map_err(|_| bad())?,
                alpha: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// Least-squares slope of `ln t` against `ln n` over the largest half of
/// the lengths (at least two points).
pub fn fit_exponent(lengths: &[usize], times: &[f64]) -> Result<f64> {
    if lengths.len() != times.len() || lengths.len() < 2 {
        return Err(Error::Config(
            "need at least two (length, time) pairs".into(),
        ));
    }
    if times.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
        return Err(Error::Config("times must be positive and finite".into()));
    }
    let keep = lengths.len().div_ceil(2).max(2);
    let start = lengths.len() - keep;
    let xs: Vec<f64> = lengths[start..].iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = times[start..].iter().map(|t| t.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

/// Floating-point operations (two per multiply-add) of one block forward,
/// counting only the matrix products. `h` is the token hidden width.
pub fn flop_count(variant: BenchVariant, batch: u64, n: u64, d: u64, h: u64) -> u64 {
    let feature_ff = 2 * batch * n * d * (4 * d) * 2;
    let mixer = match variant {
        BenchVariant::FfFixedHidden | BenchVariant::FfProportionalHidden => {
            2 * batch * d * n * h * 2
        }
        BenchVariant::AttentionBaseline => 4 * 2 * batch * n * d * d + 2 * 2 * batch * n * n * d,
    };
    mixer + feature_ff
}

fn random_tensor(rng: &mut TrainRng, shape: &[usize], scale: f32, n: usize) -> Result<Tensor<f32>> {
    let numel: usize = shape.iter().product();
    let mut data = Vec::new();
    data.try_reserve_exact(numel).map_err(|_| Error::Resource {
        n,
        bytes: numel * 4,
    })?;
    data.extend((0..numel).map(|_| rng.gen_range(-scale..scale)));
    Tensor::from_vec(shape, data)
}

struct BlockTensors {
    gamma: Tensor<f32>,
    beta: Tensor<f32>,
    mixer: Vec<Tensor<f32>>,
    feature: Vec<Tensor<f32>>,
}

fn ff_tensors(
    rng: &mut TrainRng,
    width: usize,
    hidden: usize,
    n: usize,
) -> Result<Vec<Tensor<f32>>> {
    let s1 = (1.0 / width as f32).sqrt();
    let s2 = (1.0 / hidden as f32).sqrt();
    Ok(vec![
        random_tensor(rng, &[width, hidden], s1, n)?,
        random_tensor(rng, &[hidden], s1, n)?,
        random_tensor(rng, &[hidden, width], s2, n)?,
        random_tensor(rng, &[width], s2, n)?,
    ])
}

fn block_tensors(spec: &BenchSpec, n: usize) -> Result<BlockTensors> {
    let mut rng = TrainRng::seed_from_u64(spec.seed ^ n as u64);
    let d = spec.dim;
    let mixer = match spec.variant {
        BenchVariant::AttentionBaseline => {
            let s = (1.0 / d as f32).sqrt();
            let mut v = Vec::new();
            for _ in 0..4 {
                v.push(random_tensor(&mut rng, &[d, d], s, n)?);
                v.push(random_tensor(&mut rng, &[d], s, n)?);
            }
            v
        }
        variant => ff_tensors(&mut rng, n, variant.token_hidden(n, spec.hidden), n)?,
    };
    Ok(BlockTensors {
        gamma: Tensor::ones(&[d]),
        beta: Tensor::zeros(&[d]),
        mixer,
        feature: ff_tensors(&mut rng, d, 4 * d, n)?,
    })
}

fn forward_once(spec: &BenchSpec, w: &BlockTensors, x: &Tensor<f32>) -> Result<()> {
    let tape = Tape::no_grad();
    let c = |t: &Tensor<f32>| tape.constant(t);
    let norm = Norm {
        gamma: c(&w.gamma),
        beta: c(&w.beta),
    };
    let ff = |v: &[Tensor<f32>]| FeedForward {
        w1: c(&v[0]),
        b1: c(&v[1]),
        w2: c(&v[2]),
        b2: c(&v[3]),
    };
    let feature = ff(&w.feature);
    let x: Var<'_, f32> = c(x);
    let y = match spec.variant {
        BenchVariant::AttentionBaseline => {
            let m: Vec<_> = w.mixer.iter().map(c).collect();
            let attn = Attention {
                wq: m[0],
                bq: m[1],
                wk: m[2],
                bk: m[3],
                wv: m[4],
                bv: m[5],
                wo: m[6],
                bo: m[7],
                heads: 1,
            };
            attention_block(&x, &norm, &attn, &norm, &feature, 0.0, &mut Mode::Eval)?
        }
        _ => linear_block(
            &x,
            &norm,
            &ff(&w.mixer),
            &norm,
            &feature,
            0.0,
            &mut Mode::Eval,
        )?,
    };
    std::hint::black_box(y.value());
    Ok(())
}

/// Keeps freed activations inside the process between timed passes.
///
/// A no-grad tape frees every intermediate at once when it drops. Past
/// glibc's default trim threshold that memory goes back to the kernel and the
/// next pass pays for page faults again, a cost that only appears once the
/// working set is a few MB and so bends the fitted exponent upward.
fn retain_freed_memory() {
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        #[cfg(all(target_os = "linux", target_env = "gnu"))]
        // SAFETY: mallopt only adjusts allocator tunables; both values are in range
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        }
    });
}

/// Takes `spec.repetitions` timing samples per length and fits the scaling
/// exponent to the medians.
///
/// Every length is prepared and calibrated first (`spec.warmup` passes, at
/// least one). Samples are then taken round-robin over the lengths so a slow
/// stretch on a shared machine spreads across all of them instead of
/// skewing one. On glibc the first call also raises the allocator's trim and
/// mmap thresholds for the whole process.
pub fn measure_forward(spec: &BenchSpec) -> Result<ScalingReport> {
    spec.validate()?;
    retain_freed_memory();
    let mut resident = 0usize;
    for &n in &spec.lengths {
        resident = resident.saturating_add(spec.estimated_bytes(n));
        if resident > spec.memory_limit {
            return Err(Error::Resource { n, bytes: resident });
        }
    }
    let mut prepared = Vec::with_capacity(spec.lengths.len());
    for &n in &spec.lengths {
        let w = block_tensors(spec, n)?;
        let mut rng = TrainRng::seed_from_u64(spec.seed.wrapping_add(1));
        let x = random_tensor(&mut rng, &[1, n, spec.dim], 1.0, n)?;
        let mut single = f64::INFINITY;
        for _ in 0..spec.warmup.max(1) {
            let start = Instant::now();
            forward_once(spec, &w, &x)?;
            single = single.min(start.elapsed().as_secs_f64());
        }
        let iters = (spec.min_sample_seconds / single.max(1e-9)).ceil().max(1.0) as u32;
        prepared.push((w, x, iters));
    }
    let mut samples = vec![Vec::with_capacity(spec.repetitions); spec.lengths.len()];
    for _ in 0..spec.repetitions {
        for ((w, x, iters), times) in prepared.iter().zip(&mut samples) {
            let start = Instant::now();
            for _ in 0..*iters {
                forward_once(spec, w, x)?;
            }
            times.push((start.elapsed().as_secs_f64() / f64::from(*iters)).max(1e-9));
        }
    }
    let medians: Vec<f64> = samples.iter().map(|t| median(t)).collect();
    let alpha = fit_exponent(&spec.lengths, &medians)?;
    Ok(ScalingReport {
        variant: spec.variant,
        lengths: spec.lengths.clone(),
        medians,
        alpha,
        samples,
    })
}
