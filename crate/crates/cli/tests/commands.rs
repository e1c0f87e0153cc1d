use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cpgg_core::dataset;

fn cpgg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpgg"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn cpgg")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = cpgg(dir, args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
}

const QUICK: [&str; 6] = ["--set", "pheno_vae.epochs=10", "--set", "cine_vae.epochs=1", "--set", "mar.epochs=1"];

fn with_quick<'a>(base: &[&'a str]) -> Vec<&'a str> {
    base.iter().copied().chain(QUICK).collect()
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cpgg(tmp.path(), &["gen-data", "--n", "20", "--out", "d", "--set", "mar.nope=1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mar.nope"));
}

#[test]
fn malformed_override_and_bad_flag_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(cpgg(tmp.path(), &["gen-data", "--out", "d", "--set", "novalue"]).status.code(), Some(1));
    assert_eq!(cpgg(tmp.path(), &["gen-data", "--bogus"]).status.code(), Some(1));
}

#[test]
fn missing_checkpoint_names_the_model() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cpgg(tmp.path(), &["sample", "--run", "nowhere", "--out", "s"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("phenotype VAE") && err.contains("train it first"), "{err}");
}

#[test]
fn downstream_rejects_large_rho() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cpgg(tmp.path(), &["downstream", "--rho-list", "0,6", "--run", "r", "--data", "d", "--out", "o"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_file_is_applied_and_overridden() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.cfg"), "# small\ndata.n = 30\ndata.seed = 4\n").unwrap();
    ok(tmp.path(), &["gen-data", "--config", "c.cfg", "--set", "data.n=24", "--out", "d"]);
    let ph = dataset::read_phenotypes(&tmp.path().join("d/phenotypes.csv")).unwrap();
    assert_eq!(ph.len(), 24);
}

#[test]
fn sample_writes_requested_cines_and_guidance_matters() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &with_quick(&["gen-data", "--n", "30", "--seed", "2", "--out", "d"]));
    for cmd in ["train-pheno-vae", "train-cine-vae", "train-mar"] {
        ok(dir, &with_quick(&[cmd, "--data", "d", "--out", "r"]));
    }
    for (cfg, out) in [("3.0", "s3"), ("1.0", "s1")] {
        ok(dir, &["sample", "--count", "2", "--cfg", cfg, "--seed", "9", "--steps", "4", "--export", "--run", "r", "--out", out]);
    }
    let s3 = dataset::read_cines(&dir.join("s3/cines.cpgc")).unwrap();
    let s1 = dataset::read_cines(&dir.join("s1/cines.cpgc")).unwrap();
    assert_eq!(s3.len(), 2);
    assert_eq!(dataset::read_phenotypes(&dir.join("s3/phenotypes.csv")).unwrap().len(), 2);
    assert_ne!(s3, s1);

    let gif = fs::read(dir.join("s3/sample_000.gif")).unwrap();
    assert!(gif.starts_with(b"GIF89a"));
    let frames = fs::read_dir(dir.join("s3")).unwrap().filter_map(|e| e.ok()).filter(|e| {
        let n = e.file_name().to_string_lossy().into_owned();
        n.starts_with("sample_000") && n.ends_with(".pgm")
    });
    assert_eq!(frames.count(), 8);
}
