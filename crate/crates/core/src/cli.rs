//! The `ffvit` command line. Every subcommand prints `key=value` lines or
//! CSV so output can be parsed by scripts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand};

use crate::bench::{
    measure_forward, BenchSpec, BenchVariant, DEFAULT_HIDDEN, DEFAULT_MIN_SAMPLE_SECONDS,
};
use crate::data::{load_cifar_binary, load_idx, synthetic_split, CifarSplit, Dataset};
use crate::error::{Error, Result};
use crate::model::{gradcheck_model, param_count, ModelConfig, Preset, Variant};
use crate::tensor::Coverage;
use crate::train::{evaluate_top1, load_checkpoint, TrainConfig, Trainer, LOG_HEADER};

/// Gradient checks fail above this relative error.
pub const GRADCHECK_THRESHOLD: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(
    name = "ffvit",
    version,
    about = "Feed-forward-only vision transformer toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write per-epoch checkpoints plus a CSV log.
    Train(TrainArgs),
    /// Report top-1 accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Print the exact parameter count and the delta to the reference size.
    Params(ParamsArgs),
    /// Time one block's forward pass over a range of sequence lengths.
    Bench(BenchArgs),
    /// Verify model gradients against central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("model").args(["preset", "config"])))]
struct ModelSource {
    /// tiny, base, large or reduced.
    #[arg(long)]
    preset: Option<Preset>,
    /// File of key=value lines using model and training field names.
    #[arg(long)]
    config: Option<PathBuf>,
    /// ff_only, attention_baseline or attention_only.
    #[arg(long)]
    variant: Option<Variant>,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("source").args(["data", "synthetic"])))]
struct DataSource {
    /// Directory with CIFAR-10 binary batches or IDX files.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Use the generated blob dataset.
    #[arg(long)]
    synthetic: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelSource,
    #[command(flatten)]
    data: DataSource,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataSource,
}

#[derive(Args, Debug)]
struct ParamsArgs {
    #[command(flatten)]
    model: ModelSource,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    variant: BenchVariant,
    /// Comma-separated, strictly increasing.
    #[arg(long, value_delimiter = ',', required = true)]
    seq_lens: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Token hidden width for ff_fixed_hidden.
    #[arg(long, default_value_t = DEFAULT_HIDDEN)]
    hidden: usize,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    /// Minimum wall time of one timing sample; short passes are repeated.
    #[arg(long, default_value_t = DEFAULT_MIN_SAMPLE_SECONDS)]
    min_sample_seconds: f64,
    /// Also write the CSV to this file.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// reduced or tiny.
    #[arg(long, default_value = "reduced")]
    geometry: Preset,
    #[arg(long)]
    variant: Option<Variant>,
    /// Coordinates to check for geometries too large to check exhaustively.
    #[arg(long, default_value_t = 32)]
    samples: usize,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Model and training settings read from a config file.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Without an explicit `warmup_steps`, warmup defaults to one epoch.
    pub warmup_given: bool,
}

fn parse_config_file(path: &Path) -> Result<Settings> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_text(&text)
}

/// `key=value` lines; `#` starts a comment. A `preset` key, if present,
/// must come first and replaces the reduced-geometry model defaults.
pub fn parse_config_text(text: &str) -> Result<Settings> {
    let mut s = Settings {
        model: Preset::Reduced.config(),
        train: TrainConfig::default(),
        warmup_given: false,
    };
    let mut seen_other = false;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {raw:?}", i + 1))
            })?;
        if key == "preset" {
            if seen_other {
                return Err(Error::Config(format!(
                    "line {}: preset must precede other keys",
                    i + 1
                )));
            }
            s.model = value.parse::<Preset>()?.config();
            continue;
        }
        seen_other = true;
        if key == "warmup_steps" {
            s.warmup_given = true;
        }
        if !s.model.set(key, value)? && !s.train.set(key, value)? {
            return Err(Error::Config(format!(
                "line {}: unknown key {key:?}",
                i + 1
            )));
        }
    }
    Ok(s)
}

fn resolve_model(
    src: &ModelSource,
    default: Preset,
) -> Result<(ModelConfig, TrainConfig, bool, Option<Preset>)> {
    let (mut model, train, warmup_given, preset) = match (&src.preset, &src.config) {
        (_, Some(path)) => {
            let s = parse_config_file(path)?;
            (s.model, s.train, s.warmup_given, None)
        }
        (Some(p), None) => (p.config(), TrainConfig::default(), false, Some(*p)),
        (None, None) => (
            default.config(),
            TrainConfig::default(),
            false,
            Some(default),
        ),
    };
    if let Some(v) = src.variant {
        model = model.with_variant(v);
    }
    model.validate()?;
    Ok((model, train, warmup_given, preset))
}

/// Train and eval splits for the requested source, resized to `side` pixels.
fn load_data(
    src: &DataSource,
    side: usize,
    classes: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    match &src.data {
        None => Ok(synthetic_split(classes, side, seed)),
        Some(dir) => {
            let (train, eval) =
                if dir.join("test_batch.bin").exists() || dir.join("data_batch_1.bin").exists() {
                    (
                        load_cifar_binary(dir, CifarSplit::Train)?,
                        load_cifar_binary(dir, CifarSplit::Test)?,
                    )
                } else {
                    (
                        load_idx(
                            dir.join("train-images-idx3-ubyte"),
                            dir.join("train-labels-idx1-ubyte"),
                        )?,
                        load_idx(
                            dir.join("t10k-images-idx3-ubyte"),
                            dir.join("t10k-labels-idx1-ubyte"),
                        )?,
                    )
                };
            Ok((train.resized(side)?, eval.resized(side)?))
        }
    }
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let (model, mut train_cfg, warmup_given, _) = resolve_model(&a.model, Preset::Reduced)?;
    if let Some(e) = a.epochs {
        train_cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        train_cfg.seed = s;
    }
    let (train_set, eval_set) =
        load_data(&a.data, model.image_size, model.num_classes, train_cfg.seed)?;
    if !warmup_given {
        train_cfg.warmup_steps = train_cfg.steps_per_epoch(train_set.len());
    }
    let mut trainer = Trainer::new(model, train_cfg)?;
    writeln!(out, "{LOG_HEADER}").map_err(stdout_err)?;
    let epochs = trainer.config.epochs;
    for _ in 0..epochs {
        let log = trainer.run(&train_set, &eval_set, trainer.epoch + 1, Some(&a.out))?;
        for r in &log.records {
            writeln!(out, "{}", r.to_csv_row()).map_err(stdout_err)?;
        }
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let (_, eval_set) = load_data(
        &a.data,
        ckpt.model.image_size,
        ckpt.model.num_classes,
        ckpt.train.seed,
    )?;
    let top1 = evaluate_top1(&ckpt.params, &ckpt.model, &eval_set)?;
    writeln!(
        out,
        "epoch={}\nsamples={}\ntop1={top1}",
        ckpt.epoch,
        eval_set.len()
    )
    .map_err(stdout_err)
}

fn cmd_params(a: &ParamsArgs, out: &mut dyn Write) -> Result<()> {
    let (model, _, _, preset) = resolve_model(&a.model, Preset::Base)?;
    let count = param_count(&model);
    let mut text = format!("variant={}\nparams={count}\n", model.variant);
    if let Some(p) = preset {
        text = format!("preset={}\n{text}", p.as_str());
    }
    match preset
        .and_then(Preset::reference_params)
        .filter(|_| model.variant == Variant::FfOnly)
    {
        Some(reference) => {
            let delta = count as i64 - reference as i64;
            let pct = 100.0 * delta as f64 / reference as f64;
            text.push_str(&format!(
                "reference={reference}\ndelta={delta}\ndelta_pct={pct:.4}\n"
            ));
        }
        None => text.push_str("reference=none\n"),
    }
    out.write_all(text.as_bytes()).map_err(stdout_err)
}

fn cmd_bench(a: &BenchArgs, out: &mut dyn Write) -> Result<()> {
    let spec = BenchSpec {
        hidden: a.hidden,
        repetitions: a.reps,
        warmup: a.warmup,
        min_sample_seconds: a.min_sample_seconds,
        ..BenchSpec::new(a.variant, a.seq_lens.clone(), a.dim)
    };
    let report = measure_forward(&spec)?;
    let csv = report.to_csv();
    if let Some(path) = &a.csv {
        fs::write(path, &csv).map_err(|e| Error::io(path, e))?;
    }
    out.write_all(csv.as_bytes()).map_err(stdout_err)
}

fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<bool> {
    let mut model = a.geometry.config();
    if let Some(v) = a.variant {
        model = model.with_variant(v);
    }
    let coverage = match a.geometry {
        Preset::Reduced => Coverage::All,
        Preset::Tiny => Coverage::Sample {
            count: a.samples,
            seed: a.seed,
        },
        other => {
            return Err(Error::Config(format!(
                "gradcheck supports the reduced and tiny geometries, not {}",
                other.as_str()
            )))
        }
    };
    let report = gradcheck_model(&model, a.batch.max(1), coverage, a.seed)?;
    let pass = report.max_rel_error < GRADCHECK_THRESHOLD;
    writeln!(
        out,
        "geometry={}\nvariant={}\nchecked={}\nmax_rel_error={:e}\nthreshold={GRADCHECK_THRESHOLD:e}\npass={pass}",
        a.geometry.as_str(),
        model.variant,
        report.checked,
        report.max_rel_error
    )
    .map_err(stdout_err)?;
    Ok(pass)
}

fn stdout_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 1 for validation or runtime failures, 2 for usage errors.
pub fn run<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a, out).map(|_| true),
        Command::Eval(a) => cmd_eval(a, out).map(|_| true),
        Command::Params(a) => cmd_params(a, out).map(|_| true),
        Command::Bench(a) => cmd_bench(a, out).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            let _ = writeln!(err, "error: {msg}");
            1
        }
    }
}
