use std::collections::HashMap;

use ffvit::bench::parse_csv;
use ffvit::cli::{parse_config_text, run};
use ffvit::train::TrainLog;
use ffvit::{Preset, Variant};

fn ffvit(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("ffvit").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn pairs(text: &str) -> HashMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[test]
fn params_base_reports_count_and_delta() {
    let (code, out, _) = ffvit(&["params", "--preset", "base"]);
    assert_eq!(code, 0);
    let p = pairs(&out);
    assert_eq!(p["params"], "61956724");
    assert_eq!(p["reference"], "62000000");
    assert_eq!(p["delta"], "-43276");
    let count: f64 = p["params"].parse().unwrap();
    assert!((count - 62e6).abs() / 62e6 < 0.02);
}

#[test]
fn params_for_other_variants_has_no_reference() {
    let (code, out, _) = ffvit(&[
        "params",
        "--preset",
        "tiny",
        "--variant",
        "attention_baseline",
    ]);
    assert_eq!(code, 0);
    let p = pairs(&out);
    assert_eq!(p["params"], "5717416");
    assert_eq!(p["reference"], "none");
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(ffvit(&["frobnicate"]).0, 2);
    assert_eq!(ffvit(&["params", "--bogus"]).0, 2);
    assert_eq!(ffvit(&["params", "--preset", "huge"]).0, 2);
    assert_eq!(ffvit(&["train", "--synthetic"]).0, 2);
    assert_eq!(ffvit(&["params", "--preset", "tiny", "--config", "x"]).0, 2);
    assert_eq!(ffvit(&[]).0, 2);
    assert_eq!(ffvit(&["--help"]).0, 0);
}

#[test]
fn validation_failures_exit_one_with_one_line() {
    let (code, _, err) = ffvit(&[
        "bench",
        "--variant",
        "ff_fixed_hidden",
        "--seq-lens",
        "64,32",
    ]);
    assert_eq!(code, 1);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "dim=16\nwidth=3\n").unwrap();
    let (code, _, err) = ffvit(&["params", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert_eq!(err.lines().count(), 1);
    assert!(err.contains("width"), "{err}");

    let (code, _, err) = ffvit(&["eval", "--ckpt", "/nonexistent/x.ffvt", "--synthetic"]);
    assert_eq!(code, 1);
    assert_eq!(err.lines().count(), 1);
}

#[test]
fn config_file_keys_mirror_fields() {
    let s = parse_config_text(
        "# comment\npreset=tiny\nvariant=attention_only\nlearning_rate=0.002 # inline\nwarmup_steps=7\n",
    )
    .unwrap();
    assert_eq!(
        s.model,
        Preset::Tiny.config().with_variant(Variant::AttentionOnly)
    );
    assert_eq!(s.train.learning_rate, 0.002);
    assert_eq!(s.train.warmup_steps, 7);
    assert!(s.warmup_given);
    assert!(parse_config_text("dim=4\npreset=tiny\n").is_err());
    assert!(parse_config_text("dim\n").is_err());
}

#[test]
fn gradcheck_reduced_passes() {
    let (code, out, _) = ffvit(&["gradcheck", "--geometry", "reduced"]);
    assert_eq!(code, 0, "{out}");
    let p = pairs(&out);
    let err: f64 = p["max_rel_error"].parse().unwrap();
    assert!(err < 1e-4);
    assert_eq!(p["checked"], "12756");
    assert_eq!(p["pass"], "true");
}

#[test]
fn gradcheck_rejects_large_geometries() {
    assert_eq!(ffvit(&["gradcheck", "--geometry", "base"]).0, 1);
}

#[test]
fn bench_emits_one_row_per_length() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let (code, out, _) = ffvit(&[
        "bench",
        "--variant",
        "attention_baseline",
        "--seq-lens",
        "128,256,512,1024",
        "--reps",
        "3",
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let rows = parse_csv(&out).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(
        rows.iter().map(|r| r.n).collect::<Vec<_>>(),
        [128, 256, 512, 1024]
    );
    assert!(rows
        .iter()
        .all(|r| r.alpha == rows[0].alpha && r.alpha.is_finite()));
    assert_eq!(std::fs::read_to_string(&csv).unwrap(), out);
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let (code, out, err) = ffvit(&[
        "train",
        "--synthetic",
        "--out",
        out_dir.to_str().unwrap(),
        "--epochs",
        "2",
        "--seed",
        "3",
    ]);
    assert_eq!(code, 0, "{err}");
    let log = TrainLog::parse_csv(&out).unwrap();
    assert_eq!(log.records.len(), 2);
    let on_disk =
        TrainLog::parse_csv(&std::fs::read_to_string(out_dir.join("train_log.csv")).unwrap())
            .unwrap();
    assert_eq!(on_disk, log);

    let ckpt = out_dir.join("epoch_0002.ffvt");
    let (code, out, _) = ffvit(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--synthetic"]);
    assert_eq!(code, 0);
    let p = pairs(&out);
    assert_eq!(p["epoch"], "2");
    let top1: f64 = p["top1"].parse().unwrap();
    assert_eq!(top1, log.records[1].eval_top1);
}
