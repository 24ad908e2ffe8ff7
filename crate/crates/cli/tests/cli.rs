//! Integration tests for the command-line surface: exit codes, determinism,
//! and artifact plumbing.

use std::path::Path;
use std::process::{Command, Output};

use deltafield_core::model::{load_checkpoint, ModelParams};
use deltafield_core::{io, synth};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_deltafield"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn deltafield")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read_dir_sorted(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

#[test]
fn gen_writes_manifest_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let res = run(&[
            "gen",
            "--seed",
            "1",
            "--pairs",
            "4",
            "--views",
            "3",
            "--res",
            "16",
            "16",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_code(&res, 0);
    }
    let manifest = io::read_manifest(a.join("manifest.txt")).unwrap();
    assert_eq!(manifest.len(), 4);
    // Same invocation twice: identical files.
    for name in read_dir_sorted(&a) {
        let fa = std::fs::read(a.join(&name)).unwrap();
        let fb = std::fs::read(b.join(&name)).unwrap();
        assert_eq!(fa, fb, "{name}");
    }
}

#[test]
fn gen_missing_out_is_usage_error() {
    let res = run(&["gen", "--seed", "1", "--pairs", "2"]);
    assert_code(&res, 2);
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("--out"), "{err}");
}

#[test]
fn unknown_flag_is_usage_error() {
    let res = run(&["gen", "--seed", "1", "--no-such-flag", "--out", "/tmp/x"]);
    assert_code(&res, 2);
}

#[test]
fn df_seed_env_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let res = bin()
        .args([
            "gen", "--pairs", "2", "--views", "2", "--res", "8", "8", "--out",
        ])
        .arg(&a)
        .env("DF_SEED", "9")
        .output()
        .unwrap();
    assert_code(&res, 0);
    let res = run(&[
        "gen",
        "--seed",
        "9",
        "--pairs",
        "2",
        "--views",
        "2",
        "--res",
        "8",
        "8",
        "--out",
        b.to_str().unwrap(),
    ]);
    assert_code(&res, 0);
    for name in read_dir_sorted(&a) {
        assert_eq!(
            std::fs::read(a.join(&name)).unwrap(),
            std::fs::read(b.join(&name)).unwrap(),
            "{name}"
        );
    }
}

fn gen_dataset(dir: &Path, pairs: usize, views: usize, res: usize) -> std::path::PathBuf {
    let out = dir.join("data");
    let r = run(&[
        "gen",
        "--seed",
        "3",
        "--pairs",
        &pairs.to_string(),
        "--views",
        &views.to_string(),
        "--res",
        &res.to_string(),
        &res.to_string(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_code(&r, 0);
    out.join("manifest.txt")
}

#[test]
fn pipeline_reports_every_view() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_dataset(dir.path(), 3, 3, 16);
    let out = dir.path().join("pipe");
    let res = run(&[
        "pipeline",
        "--data",
        manifest.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_code(&res, 0);
    let report = std::fs::read_to_string(out.join("pipeline_report.txt")).unwrap();
    for pair in ["0000", "0001", "0002"] {
        let views = report
            .lines()
            .filter(|l| l.starts_with(pair) && l.contains("view="))
            .count();
        assert_eq!(views, 3, "pair {pair}");
        assert!(out.join(format!("{pair}_refined.mask")).exists());
    }
}

#[test]
fn pipeline_tau_one_gates_everything_out() {
    // IoU > 1 is impossible, so no view can pass the strict gate.
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_dataset(dir.path(), 2, 3, 16);
    let out = dir.path().join("pipe");
    let res = run(&[
        "pipeline",
        "--data",
        manifest.to_str().unwrap(),
        "--tau",
        "1.0",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_code(&res, 0);
    let report = std::fs::read_to_string(out.join("pipeline_report.txt")).unwrap();
    assert!(report
        .lines()
        .filter(|l| l.contains("view="))
        .all(|l| l.contains("valid=0")));
    assert!(report
        .lines()
        .filter(|l| l.contains("selected") && !l.contains("view="))
        .all(|l| l.trim_end().ends_with("selected")));
}

#[test]
fn pipeline_no_op_filter_selects_valid_set() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_dataset(dir.path(), 2, 3, 16);
    let out = dir.path().join("pipe");
    let res = run(&[
        "pipeline",
        "--data",
        manifest.to_str().unwrap(),
        "--min-rf",
        "0",
        "--max-views",
        "999",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_code(&res, 0);
    let report = std::fs::read_to_string(out.join("pipeline_report.txt")).unwrap();
    for pair in ["0000", "0001"] {
        let valid: Vec<String> = report
            .lines()
            .filter(|l| l.starts_with(pair) && l.contains("valid=1"))
            .map(|l| {
                l.split_whitespace()
                    .find(|t| t.starts_with("view="))
                    .unwrap()
                    .trim_start_matches("view=")
                    .to_string()
            })
            .collect();
        let selected_line = report
            .lines()
            .find(|l| l.starts_with(&format!("{pair} selected")))
            .unwrap();
        let selected: Vec<String> = selected_line
            .split_whitespace()
            .skip(2)
            .map(str::to_string)
            .collect();
        let mut sorted_sel = selected.clone();
        sorted_sel.sort();
        let mut sorted_valid = valid.clone();
        sorted_valid.sort();
        assert_eq!(sorted_sel, sorted_valid, "pair {pair}");
    }
}

#[test]
fn pipeline_unreadable_data_is_io_error() {
    let res = run(&[
        "pipeline",
        "--data",
        "/nonexistent/manifest.txt",
        "--out",
        "/tmp/p",
    ]);
    assert_code(&res, 3);
}

fn write_tiny_config(path: &Path) {
    std::fs::write(
        path,
        "token_patch = 2\nmodel_dim = 8\nheads = 2\ndepth = 5\ninjection_stride = 1\n",
    )
    .unwrap();
}

#[test]
fn train_zero_steps_equals_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_dataset(dir.path(), 1, 2, 8);
    let cfg_path = dir.path().join("tiny.cfg");
    write_tiny_config(&cfg_path);
    let ckpt = dir.path().join("m.dfck");
    let res = run(&[
        "train",
        "--data",
        manifest.to_str().unwrap(),
        "--config",
        cfg_path.to_str().unwrap(),
        "--steps",
        "0",
        "--seed",
        "5",
        "--ckpt-out",
        ckpt.to_str().unwrap(),
    ]);
    assert_code(&res, 0);
    let (params, cfg) = load_checkpoint(&ckpt).unwrap();
    assert_eq!(cfg.model_dim, 8);
    assert_eq!(params, ModelParams::init(&cfg, 5));
    // Empty loss log.
    let log = std::fs::read_to_string(dir.path().join("m.dfck.log")).unwrap();
    assert!(log.is_empty());
}

#[test]
fn train_same_seed_gives_identical_loss_logs() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_dataset(dir.path(), 2, 2, 8);
    let cfg_path = dir.path().join("tiny.cfg");
    write_tiny_config(&cfg_path);
    let mut logs = Vec::new();
    for name in ["a.dfck", "b.dfck"] {
        let ckpt = dir.path().join(name);
        let res = run(&[
            "train",
            "--data",
            manifest.to_str().unwrap(),
            "--config",
            cfg_path.to_str().unwrap(),
            "--steps",
            "20",
            "--seed",
            "11",
            "--ckpt-out",
            ckpt.to_str().unwrap(),
        ]);
        assert_code(&res, 0);
        logs.push(std::fs::read(dir.path().join(format!("{name}.log"))).unwrap());
    }
    assert!(!logs[0].is_empty());
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn train_unknown_config_key_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_dataset(dir.path(), 1, 2, 8);
    let cfg_path = dir.path().join("bad.cfg");
    std::fs::write(&cfg_path, "bogus_key = 1\n").unwrap();
    let res = run(&[
        "train",
        "--data",
        manifest.to_str().unwrap(),
        "--config",
        cfg_path.to_str().unwrap(),
        "--steps",
        "1",
        "--ckpt-out",
        dir.path().join("m.dfck").to_str().unwrap(),
    ]);
    assert_code(&res, 2);
    assert!(String::from_utf8_lossy(&res.stderr).contains("bogus_key"));
}

#[test]
fn gradcheck_small_config_passes_and_controls_fail() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.cfg");
    write_tiny_config(&cfg_path);
    let cfg = cfg_path.to_str().unwrap();

    let ok = run(&["gradcheck", "--config", cfg, "--seed", "2"]);
    assert_code(&ok, 0);
    assert!(String::from_utf8_lossy(&ok.stdout).contains("gradcheck ok"));

    // Float roundoff makes 1e-12 unattainable.
    let strict = run(&[
        "gradcheck",
        "--config",
        cfg,
        "--seed",
        "2",
        "--tol",
        "1e-12",
    ]);
    assert_code(&strict, 5);

    // Corrupting one gradient must fail and name the array.
    let control = run(&[
        "gradcheck",
        "--config",
        cfg,
        "--seed",
        "2",
        "--negative-control",
    ]);
    assert_code(&control, 5);
    assert!(String::from_utf8_lossy(&control.stderr).contains("head.weight"));
}

#[test]
fn eval_reports_zero_background_drift() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_dataset(dir.path(), 2, 2, 8);
    let cfg_path = dir.path().join("tiny.cfg");
    write_tiny_config(&cfg_path);
    let ckpt = dir.path().join("m.dfck");
    let res = run(&[
        "train",
        "--data",
        manifest.to_str().unwrap(),
        "--config",
        cfg_path.to_str().unwrap(),
        "--steps",
        "2",
        "--seed",
        "1",
        "--ckpt-out",
        ckpt.to_str().unwrap(),
    ]);
    assert_code(&res, 0);
    let report = dir.path().join("report.txt");
    let res = run(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        manifest.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_code(&res, 0);
    let text = std::fs::read_to_string(&report).unwrap();
    for line in text.lines().filter(|l| l.starts_with("pair ")) {
        let drift: f64 = line
            .split_whitespace()
            .skip_while(|t| *t != "background_drift")
            .nth(1)
            .unwrap()
            .parse()
            .unwrap();
        assert_eq!(drift, 0.0, "{line}");
    }
    assert!(text.lines().any(|l| l.starts_with("aggregate ")));
}

#[test]
fn eval_empty_dataset_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("manifest.txt");
    std::fs::write(&manifest, "").unwrap();
    // A checkpoint is needed first.
    let data = gen_dataset(dir.path(), 1, 2, 8);
    let cfg_path = dir.path().join("tiny.cfg");
    write_tiny_config(&cfg_path);
    let ckpt = dir.path().join("m.dfck");
    let res = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        cfg_path.to_str().unwrap(),
        "--steps",
        "0",
        "--ckpt-out",
        ckpt.to_str().unwrap(),
    ]);
    assert_code(&res, 0);
    let res = run(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        manifest.to_str().unwrap(),
        "--report",
        dir.path().join("r.txt").to_str().unwrap(),
    ]);
    assert_code(&res, 3);
}

#[test]
fn export_counts_vertices_and_guards_magic() {
    let dir = tempfile::tempdir().unwrap();
    // 2x4x4 map: 32 vertices.
    let (spec, op) = synth::random_pair(1, 2, 4, 4, 0.0).unwrap();
    let pair = synth::apply_edit(&spec, &op).unwrap();
    let pmap = dir.path().join("m.pmap");
    io::write_pointmap(&pmap, &pair.base).unwrap();
    let ply = dir.path().join("m.ply");
    let res = run(&[
        "export",
        "--in",
        pmap.to_str().unwrap(),
        "--out",
        ply.to_str().unwrap(),
    ]);
    assert_code(&res, 0);
    let text = std::fs::read_to_string(&ply).unwrap();
    assert!(text.contains("element vertex 32"));
    assert_eq!(
        text.lines()
            .skip_while(|l| *l != "end_header")
            .skip(1)
            .count(),
        32
    );

    // Corrupted magic: usage-class failure.
    let bad = dir.path().join("bad.pmap");
    std::fs::write(&bad, b"XXXX1\0garbage").unwrap();
    let res = run(&[
        "export",
        "--in",
        bad.to_str().unwrap(),
        "--out",
        ply.to_str().unwrap(),
    ]);
    assert_code(&res, 2);

    // Missing input: I/O failure.
    let res = run(&[
        "export",
        "--in",
        "/nonexistent.pmap",
        "--out",
        ply.to_str().unwrap(),
    ]);
    assert_code(&res, 3);
}

#[test]
fn train_divergence_is_numeric_failure_with_dump() {
    // An absurd learning rate blows the parameters up within a few steps.
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_dataset(dir.path(), 1, 2, 8);
    let cfg_path = dir.path().join("explode.cfg");
    std::fs::write(
        &cfg_path,
        "token_patch = 2\nmodel_dim = 8\nheads = 2\ndepth = 5\ninjection_stride = 1\nlr = 1e30\n",
    )
    .unwrap();
    let ckpt = dir.path().join("m.dfck");
    let res = run(&[
        "train",
        "--data",
        manifest.to_str().unwrap(),
        "--config",
        cfg_path.to_str().unwrap(),
        "--steps",
        "10",
        "--seed",
        "1",
        "--ckpt-out",
        ckpt.to_str().unwrap(),
    ]);
    assert_code(&res, 4);
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("diagnostic dump"), "{err}");
    assert!(dir.path().join("m.dump").exists());
}
