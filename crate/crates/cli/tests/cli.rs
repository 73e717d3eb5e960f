//! End-to-end runs of the `distillnet` binary. Commands that read data use
//! `DISTILLNET_DATA_DIR`, falling back to `<workspace>/data/mnist`.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use distillnet::data::encode_idx;
use tempfile::TempDir;

fn data_dir() -> PathBuf {
    std::env::var_os("DISTILLNET_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_distillnet"))
        .args(args)
        .env("DISTILLNET_DATA_DIR", data_dir())
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}\nstdout:\n{stdout}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

fn code(args: &[&str]) -> i32 {
    cli(args).status.code().expect("exit code")
}

fn path(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_str().unwrap().to_string()
}

/// Parses the percentage after `label` in `text`.
fn percent_after(text: &str, label: &str) -> f64 {
    let rest = &text[text.find(label).unwrap_or_else(|| panic!("`{label}` not in:\n{text}")) + label.len()..];
    let num: String = rest
        .trim_start()
        .chars()
        .take_while(|c| c.is_ascii_digit() || *c == '.')
        .collect();
    num.parse().unwrap()
}

#[test]
fn error_classes_have_distinct_exit_codes() {
    let dir = TempDir::new().unwrap();
    let model = path(&dir, "m.dnet");
    ok(&["init", "--out", &model]);

    let unknown_flag = code(&["eval", "--model", &model, "--bogus"]);
    let missing_file = code(&["eval", "--model", &path(&dir, "absent.dnet")]);
    let bad_class = code(&["eval", "--model", &model, "--classes", "3,12"]);
    std::fs::write(path(&dir, "junk.dnet"), b"JUNKJUNKJUNK").unwrap();
    let corrupt = code(&["eval", "--model", &path(&dir, "junk.dnet")]);
    let codes = [unknown_flag, missing_file, bad_class, corrupt];
    assert!(codes.iter().all(|&c| c != 0), "{codes:?}");
    for i in 0..codes.len() {
        for j in i + 1..codes.len() {
            assert_ne!(codes[i], codes[j], "{codes:?}");
        }
    }
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn untrained_model_is_at_chance() {
    let dir = TempDir::new().unwrap();
    let model = path(&dir, "m.dnet");
    ok(&["--seed", "3", "init", "--out", &model]);
    let out = ok(&["eval", "--model", &model, "--limit", "1000"]);
    let acc = percent_after(&out, "(all classes):");
    assert!((acc - 10.0).abs() <= 5.0, "{out}");
}

#[test]
fn all_ones_plan_reports_unit_compression() {
    let dir = TempDir::new().unwrap();
    let (model, plan, kv) = (path(&dir, "m.dnet"), path(&dir, "p.dbmp"), path(&dir, "r.kv"));
    ok(&["init", "--out", &model]);
    ok(&[
        "distill",
        "--model",
        &model,
        "--keep-classes",
        "0,1,2,3,4,5,6,7,8,9",
        "--thresholds",
        "0,0",
        "--limit",
        "500",
        "--out",
        &plan,
    ]);
    let text = ok(&["report", "--model", &model, "--bitmap", &plan, "--kv", &kv]);
    assert!(text.contains("conv1") && text.contains("conv2"), "{text}");
    let kv = std::fs::read_to_string(&kv).unwrap();
    let ratios: Vec<&str> = kv.lines().filter(|l| l.contains(".compression_ratio=")).collect();
    assert_eq!(ratios.len(), 2);
    assert!(ratios.iter().all(|l| l.ends_with("=1.000")), "{kv}");
    assert!(kv.contains("skipped_flops=0\n"));
}

#[test]
fn train_distill_run_bench_report() {
    let dir = TempDir::new().unwrap();
    let (model, plan) = (path(&dir, "m.dnet"), path(&dir, "p.dbmp"));
    let trained = ok(&["train", "--out", &model, "--epochs", "1", "--limit", "3000"]);
    assert!(percent_after(&trained, "test accuracy:") > 80.0, "{trained}");

    let distill = [
        "distill",
        "--model",
        &model,
        "--keep-classes",
        "0,1",
        "--budget",
        "0.01",
        "--limit",
        "3000",
        "--out",
        &plan,
    ];
    let out = ok(&distill);
    let calib = &out[out.find("calibration accuracy").unwrap()..];
    let before = percent_after(calib, "samples):");
    let after = percent_after(calib, "-> ");
    assert!(after >= before - 1.0 - 1e-9, "{out}");
    let first = std::fs::read(&plan).unwrap();
    assert_eq!(&first[..4], b"DBMP");
    ok(&distill);
    assert_eq!(std::fs::read(&plan).unwrap(), first, "distill is deterministic");

    let pixels: Vec<(Vec<u8>, u8)> = (0..2u8)
        .map(|i| ((0..784).map(|p| ((p * 7 + i as usize * 31) % 256) as u8).collect(), i))
        .collect();
    let (images, _) = encode_idx(28, 28, &pixels);
    let input = path(&dir, "in.idx");
    std::fs::write(&input, images).unwrap();
    let run = ok(&["run", "--model", &model, "--input", &input, "--bitmap", &plan]);
    assert_eq!(run.lines().filter(|l| l.contains("class")).count(), 2, "{run}");
    assert_eq!(
        ok(&["run", "--model", &model, "--input", &input, "--bitmap", &plan]),
        run
    );

    let bench = ok(&[
        "bench",
        "--model",
        &model,
        "--bitmap",
        &plan,
        "--inputs",
        "20",
        "--repetitions",
        "3",
    ]);
    assert!(bench.contains("speedup:"), "{bench}");
    let report = ok(&[
        "report",
        "--model",
        &model,
        "--bitmap",
        &plan,
        "--accuracy",
        "--out",
        &path(&dir, "r.txt"),
    ]);
    assert!(
        report.contains("accuracy:") && report.contains("skipped FLOPs:"),
        "{report}"
    );
    assert_eq!(std::fs::read_to_string(path(&dir, "r.txt")).unwrap(), report);

    let analyze = ok(&[
        "analyze",
        "--model",
        &model,
        "--thresholds",
        "0.5,0.5",
        "--limit",
        "1000",
        "--histogram",
        &path(&dir, "h.csv"),
    ]);
    assert!(analyze.starts_with("layer,tau,tau_prime,TH"), "{analyze}");
    let hist = std::fs::read_to_string(path(&dir, "h.csv")).unwrap();
    assert!(hist.starts_with("layer,bin_lo,bin_hi,count\n"));

    // A plan for another model shape is rejected.
    let other = path(&dir, "cifar.dnet");
    ok(&["--dataset", "cifar10", "init", "--out", &other]);
    assert_ne!(code(&["report", "--model", &model, "--bitmap", &other]), 0);
}
