//! The `pat` binary: exit codes, messages and files.

mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::small_run;

fn pat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pat"))
        .args(args)
        .env("PAT_NUM_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = pat(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes the small run configuration and generates a 4-sample dataset.
fn small_dataset(dir: &Path) -> (String, String) {
    let cfg = dir.join("run.json");
    fs::write(&cfg, small_run().to_json()).unwrap();
    let data = dir.join("data");
    ok(&["gen", "--config", s(&cfg), "--count", "4", "--out", s(&data)]);
    (s(&cfg).to_owned(), s(&data).to_owned())
}

#[test]
fn gen_is_reproducible_and_validates_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = small_dataset(dir.path());
    let manifest = fs::read_to_string(Path::new(&data).join("manifest.json")).unwrap();
    let value: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(value["samples"].as_array().unwrap().len(), 4);
    assert_eq!(value["test_count"], 1);
    let again = dir.path().join("again");
    ok(&["gen", "--config", &cfg, "--count", "4", "--out", s(&again)]);
    assert_eq!(manifest, fs::read_to_string(again.join("manifest.json")).unwrap());

    assert_eq!(pat(&["gen", "--count", "0", "--out", s(&again)]).status.code(), Some(2));
    let o = pat(&["gen", "--config", &cfg, "--count", "2", "--test-count", "3", "--out", s(&again)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn configuration_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"train": {"learning_rate": 0.1}}"#).unwrap();
    let o = pat(&["gen", "--config", s(&bad), "--count", "2", "--out", s(dir.path())]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown field"));

    let o = pat(&["train", "--variant", "bogus", "--data", "x", "--out", "y"]);
    assert_eq!(o.status.code(), Some(2));
    let o = pat(&["train", "--data", s(&dir.path().join("missing")), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn train_eval_and_recon() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = small_dataset(dir.path());
    let out = dir.path().join("unet");
    let text = ok(&[
        "train", "--config", &cfg, "--data", &data, "--out", s(&out), "--variant", "unet_post", "--epochs", "4", "--quiet",
    ]);
    assert!(text.contains("unet_post"), "{text}");
    let log = fs::read_to_string(out.join("loss.csv")).unwrap();
    let totals: Vec<f64> = log.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(totals.len(), 8);
    assert!(totals.last().unwrap() < totals.first().unwrap(), "{totals:?}");

    let report = dir.path().join("report");
    ok(&["eval", "--config", &cfg, "--data", &data, "--methods", "das", "--out", s(&report)]);
    let csv = fs::read_to_string(report.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 1 + 2);

    let o = pat(&["eval", "--config", &cfg, "--data", &data, "--methods", "das,ynet", "--out", s(&report)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("'full'"));

    let ckpt = out.join("final.ckpt");
    ok(&["eval", "--config", &cfg, "--data", &data, "--methods", "unet,gt", "--ckpt", s(&ckpt), "--diff", "--out", s(&report)]);
    assert_eq!(fs::read_dir(report.join("diff")).unwrap().count(), 2);

    let sino = Path::new(&data).join("samples/s00003_sino.patn");
    let a = dir.path().join("a.patn");
    ok(&["recon", "--config", &cfg, "--input", s(&sino), "--method", "unet", "--ckpt", s(&ckpt), "--out", s(&a)]);
    assert!(a.with_extension("png").is_file());
    let o = pat(&["recon", "--config", &cfg, "--input", s(&sino), "--method", "ynet", "--out", s(&a)]);
    assert_eq!(o.status.code(), Some(2));
    let o = pat(&["recon", "--config", &cfg, "--input", s(&sino), "--method", "tv", "--out", s(&a)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn recon_at_full_size_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen", "--count", "2", "--out", s(&data)]);
    let sino = data.join("samples/s00000_sino.patn");
    let (a, b) = (dir.path().join("a.patn"), dir.path().join("b.patn"));
    ok(&["recon", "--input", s(&sino), "--method", "das", "--out", s(&a)]);
    ok(&["recon", "--input", s(&sino), "--method", "das", "--out", s(&b)]);
    let pgm = fs::read(a.with_extension("pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n128 128\n255\n"), "{:?}", &pgm[..16]);
    assert_eq!(pgm, fs::read(b.with_extension("pgm")).unwrap());
    assert_eq!(fs::read(&a).unwrap(), fs::read(data.join("samples/s00000_das.patn")).unwrap());
}

#[test]
fn schema_is_valid_json() {
    let text = ok(&["schema"]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["type"], "object");
}
