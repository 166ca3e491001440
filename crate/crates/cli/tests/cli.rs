//! End-to-end runs of the `endd` binary on a tiny configuration.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

const TINY: &[&str] = &[
    "--train-size",
    "60",
    "--test-size",
    "12",
    "--ensemble-size",
    "2",
    "--epochs",
    "2",
    "--embed-dim",
    "6",
    "--hidden-dim",
    "8",
    "--batch-size",
    "16",
];

fn endd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_endd"))
        .arg("--output-dir")
        .arg(dir)
        .args(TINY)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = endd(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// One full tiny pipeline, shared by the tests that only read its outputs.
fn pipeline() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        ok(p, &["gen-data"]);
        ok(p, &["train-ensemble"]);
        ok(p, &["distill"]);
        ok(p, &["distill-dist", "--objective", "nll"]);
        ok(p, &["distill-dist", "--objective", "kl"]);
        ok(p, &["evaluate"]);
        dir
    })
    .path()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn pipeline_writes_every_artifact() {
    let p = pipeline();
    for f in [
        "data/train.jsonl",
        "data/test_id.jsonl",
        "data/test_ood.jsonl",
        "data/vocab.txt",
    ] {
        assert!(p.join(f).is_file(), "{f}");
    }
    for f in [
        "member_0.ckpt",
        "member_1.ckpt",
        "dist.ckpt",
        "nll.ckpt",
        "kl.ckpt",
    ] {
        assert!(p.join("checkpoints").join(f).is_file(), "{f}");
    }
    for stem in ["gleu", "uncertainty", "auc_rr", "rejection"] {
        for ext in ["txt", "csv"] {
            assert!(
                p.join(format!("results/{stem}.{ext}")).is_file(),
                "{stem}.{ext}"
            );
        }
    }
    assert!(p.join("results/effective_config.toml").is_file());
    let ann = p.join("results/annotations");
    for f in [
        "ind0_id", "ind1_ood", "ens_mix", "dist_id", "gua_ood", "kl_mix",
    ] {
        assert!(ann.join(format!("{f}.jsonl")).is_file(), "{f}");
    }
}

#[test]
fn gua_and_dist_report_the_same_gleu() {
    let rows = csv_rows(&pipeline().join("results/gleu.csv"));
    let header = &rows[0];
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    for r in &rows[1..] {
        assert_eq!(r[col("gua")], r[col("dist")], "{r:?}");
    }
}

#[test]
fn mix_annotations_concatenate_id_then_ood() {
    let read = |stem: &str| {
        fs::read_to_string(pipeline().join(format!("results/annotations/{stem}.jsonl"))).unwrap()
    };
    let (id, ood, mix) = (read("ens_id"), read("ens_ood"), read("ens_mix"));
    let hyps = |s: &str| -> Vec<serde_json::Value> {
        s.lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["hyp"].clone())
            .collect()
    };
    let mut expected = hyps(&id);
    expected.extend(hyps(&ood));
    assert_eq!(hyps(&mix), expected);
    assert_eq!(mix.lines().count(), 24);
}

#[test]
fn manual_ranking_curve_has_unit_relative_area() {
    let p = pipeline();
    let out_csv = p.join("curves/manual.csv");
    let svg = p.join("curves/manual.svg");
    let ann = p.join("results/annotations/gua_mix.jsonl");
    let stdout = ok(
        p,
        &[
            "reject-curve",
            "--annotations",
            ann.to_str().unwrap(),
            "--metric",
            "manual",
            "--out",
            out_csv.to_str().unwrap(),
            "--svg",
            svg.to_str().unwrap(),
        ],
    );
    assert!(stdout.contains("auc_rr=1.000000"), "{stdout}");
    let text = fs::read_to_string(&out_csv).unwrap();
    assert!(text.starts_with("fraction,score\n0.0000,"));
    assert!(text.lines().any(|l| l == "1.0000,1.000000"));
    assert!(text
        .trim_end()
        .lines()
        .last()
        .unwrap()
        .ends_with(",auc_rr=1.000000"));
    assert!(fs::read_to_string(&svg).unwrap().starts_with("<svg"));
}

#[test]
fn generation_and_training_are_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        ok(d, &["gen-data"]);
        ok(
            d,
            &["train-ensemble", "--ensemble-size", "1", "--epochs", "1"],
        );
    }
    let same = |f: &str| {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        )
    };
    same("data/train.jsonl");
    same("data/test_ood.jsonl");
    same("checkpoints/member_0.ckpt");

    let c = tempfile::tempdir().unwrap();
    ok(c.path(), &["gen-data", "--data-seed", "9"]);
    assert_ne!(
        fs::read(a.path().join("data/train.jsonl")).unwrap(),
        fs::read(c.path().join("data/train.jsonl")).unwrap()
    );
}

#[test]
fn failures_print_one_structured_line_and_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = endd(dir.path(), &["evaluate"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    let line = stderr.lines().last().unwrap();
    assert!(
        line.starts_with("error: command=evaluate message=\""),
        "{line}"
    );
    assert!(line.ends_with('"'), "{line}");
}

#[test]
fn bad_arguments_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = endd(
        dir.path(),
        &[
            "reject-curve",
            "--annotations",
            "x",
            "--out",
            "y",
            "--metric",
            "bleu",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    let out = endd(dir.path(), &["evaluate", "--systems", "ens,oracle"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_files_are_validated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "ensemble_size = 3\n[eval]\ntemperature = 2.0\n").unwrap();
    let shown = ok(
        dir.path(),
        &["--config", cfg.to_str().unwrap(), "show-config"],
    );
    assert!(shown.contains("temperature = 2.0"), "{shown}");
    // Command-line flags override the file.
    assert!(shown.contains("ensemble_size = 2"), "{shown}");

    fs::write(&cfg, "ensembel_size = 3\n").unwrap();
    let out = endd(
        dir.path(),
        &["--config", cfg.to_str().unwrap(), "show-config"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("command=show-config"));
}
