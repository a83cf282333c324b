mod common;

use std::path::Path;
use std::process::{Command, Output};

use terragen::diffusion::Model;
use terragen::layout::{read_layout, validate, write_layout, BBox, CategoryId, Layout, LayoutEntity, TaskId};

fn terragen(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_terragen"))
        .arg("--out")
        .arg(root)
        .args(args)
        .env_remove("TERRAGEN_SEED")
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "{}\n{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
}

fn small_data(root: &Path, dest: &str, seed: &str) {
    let out = terragen(
        root,
        &["--seed", seed, "--set", "image_size=16", "--set", "train=6", "--set", "val=2", "--set", "test=3", "gen-data", "--dest", dest],
    );
    ok(&out);
}

fn files(dir: &Path, ext: &str) -> Vec<std::path::PathBuf> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == ext) && p.file_name().unwrap() != "run.json")
        .collect();
    v.sort();
    v
}

#[test]
fn validate_accepts_generated_data_and_flags_overlaps() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path(), "data", "3");
    let out = terragen(dir.path(), &["validate", "--data", "data"]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("11 layouts, 0 issues"));

    let e = LayoutEntity::with_box(CategoryId::VEHICLE, BBox::new(0.1, 0.1, 0.3, 0.3).unwrap());
    write_layout(&dir.path().join("bad.json"), &Layout::new(TaskId::Detection, vec![e.clone(), e])).unwrap();
    let out = terragen(dir.path(), &["validate", "--layout", "bad.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("OverlappingBoxes"));
}

#[test]
fn augment_writes_valid_variants() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path(), "data", "4");
    ok(&terragen(dir.path(), &["--seed", "2", "augment", "--data", "data", "--split", "train", "--multiple", "3", "--dest", "aug"]));
    let written = files(&dir.path().join("aug"), "json");
    assert_eq!(written.len(), 18);
    for p in &written {
        assert!(validate(&read_layout(p).unwrap()).is_empty(), "{}", p.display());
    }
    let first = std::fs::read(&written[0]).unwrap();
    ok(&terragen(dir.path(), &["--seed", "2", "augment", "--data", "data", "--split", "train", "--multiple", "3", "--dest", "again"]));
    assert_eq!(std::fs::read(dir.path().join("again").join(written[0].file_name().unwrap())).unwrap(), first);
    assert_eq!(terragen(dir.path(), &["augment", "--data", "data", "--multiple", "0"]).status.code(), Some(1));
}

#[test]
fn sampling_is_reproducible_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_model_config();
    cfg.unet.in_channels = 3;
    Model::new(cfg).unwrap().save(&dir.path().join("m.ckpt"), &[], serde_json::json!({})).unwrap();
    write_layout(&dir.path().join("l.json"), &common::tiny_layout()).unwrap();
    let sample = |seed: &str, dest: &str| {
        let args = ["--seed", seed, "--set", "ddim_steps=3", "sample", "--checkpoint", "m.ckpt", "--layout", "l.json", "--dest", dest];
        ok(&terragen(dir.path(), &args));
        std::fs::read(dir.path().join(dest).join("l.png")).unwrap()
    };
    let (a, b, c) = (sample("7", "a"), sample("7", "b"), sample("8", "c"));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn unknown_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(terragen(dir.path(), &["gen-data", "--bogus"]).status.code(), Some(2));
    assert_eq!(terragen(dir.path(), &["frobnicate"]).status.code(), Some(2));
    let out = terragen(dir.path(), &["--set", "no_such_key=1", "gen-data"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}

#[test]
fn run_file_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path(), "first", "11");
    let run: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("first/run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "gen-data");
    assert_eq!(run["config"]["seed"], 11);
    assert_eq!(run["config"]["image_size"], 16);
    ok(&terragen(dir.path(), &["--config", "first/run.json", "gen-data", "--dest", "second"]));
    let (a, b) = (dir.path().join("first"), dir.path().join("second"));
    let pngs = |d: &Path| files(&d.join("images"), "png").iter().map(|p| std::fs::read(p).unwrap()).collect::<Vec<_>>();
    assert_eq!(pngs(&a).len(), 11);
    assert_eq!(pngs(&a), pngs(&b));
}

#[test]
fn seed_comes_from_the_flag_then_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = |env: Option<&str>, flag: Option<&str>, dest: &str| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_terragen"));
        cmd.arg("--out").arg(dir.path()).env_remove("TERRAGEN_SEED");
        if let Some(e) = env {
            cmd.env("TERRAGEN_SEED", e);
        }
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        ok(&cmd.args(["--set", "image_size=16", "--set", "train=1", "--set", "val=0", "--set", "test=0"]).args(["gen-data", "--dest", dest]).output().unwrap());
        let run: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join(dest).join("run.json")).unwrap()).unwrap();
        run["config"]["seed"].as_u64().unwrap()
    };
    assert_eq!(run(Some("21"), None, "a"), 21);
    assert_eq!(run(Some("21"), Some("5"), "b"), 5);
    assert_eq!(run(None, None, "c"), 0);
}
