//! End-to-end subcommand tests against the built binary: artifact layout,
//! exit-code contract, and byte-level determinism of rerun outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use slicefm::config::RunConfig;
use slicefm::encoder::{load_checkpoint, EncoderParams};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_slicefm"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "slicefm {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(args: &[&str]) -> i32 {
    bin().args(args).output().unwrap().status.code().unwrap()
}

fn write_spec(dir: &Path) -> PathBuf {
    let p = dir.join("spec.json");
    fs::write(
        &p,
        r#"{"num_volumes": 12, "grid": [6, 32, 32], "organ_count": 3,
            "background_fraction_range": [0.5, 0.7], "noise_sigma": 2.0, "seed": 11}"#,
    )
    .unwrap();
    p
}

fn write_config(dir: &Path, steps: u64, warmup: u64) -> PathBuf {
    let p = dir.join("cfg.json");
    fs::write(
        &p,
        format!(
            r#"{{"train": {{"steps": {steps}, "warmup_steps": {warmup}, "batch_size": 2,
                 "resolution": 32, "checkpoint_every": 1000, "probe_every": 2}},
                "encoder": {{"image_size": 32, "patch_size": 8, "dim": 24, "depth": 1,
                 "heads": 2, "head_prototypes": 32, "head_bottleneck": 12, "head_hidden": 48}}}}"#
        ),
    )
    .unwrap();
    p
}

fn gen_data(dir: &Path) -> PathBuf {
    let spec = write_spec(dir);
    let data = dir.join("data");
    run_ok(&["generate-data", "--spec", spec.to_str().unwrap(), "--out", data.to_str().unwrap()]);
    data
}

fn sha(path: &Path) -> String {
    use sha2::{Digest, Sha256};
    format!("{:x}", Sha256::digest(fs::read(path).unwrap()))
}

#[test]
fn generate_data_writes_volumes_and_index_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path());
    let index: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(data.join("index.json")).unwrap()).unwrap();
    let files = index["files"].as_array().unwrap();
    assert_eq!(files.len(), 12);
    for f in files {
        assert!(data.join(f.as_str().unwrap()).is_file());
    }
    // Same spec, fresh directory: identical bytes.
    let spec = dir.path().join("spec.json");
    let again = dir.path().join("data2");
    run_ok(&["generate-data", "--spec", spec.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    for f in files {
        let f = f.as_str().unwrap();
        assert_eq!(sha(&data.join(f)), sha(&again.join(f)), "{f} differs on rerun");
    }
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    assert_eq!(exit_code(&["generate-data", "--out", "/tmp/x"]), 2);
}

#[test]
fn bad_spec_and_bad_config_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{nope").unwrap();
    let out = dir.path().join("out");
    assert_eq!(
        exit_code(&["generate-data", "--spec", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]),
        2
    );
    let data = gen_data(dir.path());
    assert_eq!(
        exit_code(&[
            "pretrain",
            "--config",
            bad.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap()
        ]),
        2
    );
}

#[test]
fn pretrain_zero_steps_checkpoint_equals_init() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path());
    let cfg_path = write_config(dir.path(), 0, 0);
    let out = dir.path().join("run");
    run_ok(&[
        "pretrain",
        "--config",
        cfg_path.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let ckpt = load_checkpoint(&out.join("final.ckpt")).unwrap();
    assert_eq!(ckpt.step, 0);
    let cfg = RunConfig::load(&cfg_path).unwrap();
    let init = EncoderParams::new(&cfg.encoder, cfg.train.seed).unwrap();
    // The checkpoint container stores tensors as f32, so compare at the
    // container's precision.
    for (name, m) in &init.t {
        let stored = m.mapv(|v| v as f32 as f64);
        assert_eq!(stored, ckpt.student.t[name], "tensor {name} changed with steps=0");
    }
}

#[test]
fn pretrain_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path());
    let cfg = write_config(dir.path(), 4, 1);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        run_ok(&[
            "pretrain",
            "--config",
            cfg.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
    }
    for f in ["trainlog.csv", "final.ckpt", "config.json"] {
        assert_eq!(sha(&a.join(f)), sha(&b.join(f)), "{f} differs on rerun");
    }
    // Manifest hash is recomputable from the stored config.
    let manifest = slicefm::config::RunManifest::load(&a.join("manifest.json")).unwrap();
    let stored = RunConfig::load(&a.join("config.json")).unwrap();
    assert_eq!(manifest.config_hash, stored.hash().unwrap());
}

#[test]
fn corrupt_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path());
    let cfg = write_config(dir.path(), 2, 0);
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, b"not a checkpoint at all").unwrap();
    let code = exit_code(&[
        "finetune-highres",
        "--config",
        cfg.to_str().unwrap(),
        "--ckpt",
        bad.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(code, 3);
}

#[test]
fn probe_reports_five_seed_rows_per_task() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path());
    let cfg = write_config(dir.path(), 2, 0);
    let run = dir.path().join("run");
    run_ok(&[
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    let tasks = dir.path().join("tasks.json");
    fs::write(
        &tasks,
        format!(r#"{{"data_dir": "{}", "resolution": 32, "suite": ["organ_class", "age"]}}"#, data.display()),
    )
    .unwrap();
    let probe = dir.path().join("probe");
    run_ok(&[
        "probe",
        "--ckpt",
        run.join("final.ckpt").to_str().unwrap(),
        "--tasks",
        tasks.to_str().unwrap(),
        "--out",
        probe.to_str().unwrap(),
    ]);
    let csv = fs::read_to_string(probe.join("report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "task,seed,metric,value");
    assert_eq!(lines.iter().filter(|l| l.starts_with("organ_class,")).count(), 5);
    assert_eq!(lines.iter().filter(|l| l.starts_with("age,")).count(), 5);
    assert_eq!(lines.iter().filter(|l| l.starts_with("aggregate,all,mean,")).count(), 1);
    assert_eq!(lines.len(), 1 + 5 + 5 + 1);
}

#[test]
fn fewshot_writes_curve_csv_and_png() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path());
    let cfg = write_config(dir.path(), 2, 0);
    let run = dir.path().join("run");
    run_ok(&[
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    let tasks = dir.path().join("tasks.json");
    fs::write(
        &tasks,
        format!(r#"{{"data_dir": "{}", "resolution": 32, "suite": ["organ_class"]}}"#, data.display()),
    )
    .unwrap();
    let fs_out = dir.path().join("fs");
    run_ok(&[
        "fewshot",
        "--ckpt",
        run.join("final.ckpt").to_str().unwrap(),
        "--tasks",
        tasks.to_str().unwrap(),
        "--shots",
        "1,2",
        "--out",
        fs_out.to_str().unwrap(),
    ]);
    let csv = fs::read_to_string(fs_out.join("fewshot.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "shots,seed,metric,value");
    // Each sweep point contributes 5 seed rows, or 1 row when skipped.
    for k in ["1,", "2,"] {
        let n = lines[1..].iter().filter(|l| l.starts_with(k)).count();
        assert!(n == 5 || n == 1, "unexpected row count {n} for shots {k}");
    }
    let png = fs::read(fs_out.join("fewshot.png")).unwrap();
    assert!(png.len() > 1000, "png too small: {}", png.len());
}

#[test]
fn simmap_self_query_peaks_at_query_patch() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path());
    let cfg = write_config(dir.path(), 2, 0);
    let run = dir.path().join("run");
    run_ok(&[
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    // Query = middle slice of volume 0, patch 5 of the 4x4 grid (row 1, col 1).
    let query = format!("{}:3:5", data.join("vol_00000.rvol").display());
    let sim = dir.path().join("sim");
    run_ok(&[
        "simmap",
        "--ckpt",
        run.join("final.ckpt").to_str().unwrap(),
        "--query",
        &query,
        "--targets",
        data.to_str().unwrap(),
        "--out",
        sim.to_str().unwrap(),
    ]);
    // Target 0's middle slice (6 /2 = 3) is exactly the query image.
    let csv = fs::read_to_string(sim.join("sim_000.csv")).unwrap();
    let vals: Vec<Vec<f64>> = csv
        .lines()
        .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
        .collect();
    assert_eq!(vals.len(), 4);
    let (mut best, mut best_v) = ((0usize, 0usize), f64::NEG_INFINITY);
    for (r, row) in vals.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            if v > best_v {
                best = (r, c);
                best_v = v;
            }
        }
    }
    assert_eq!(best, (1, 1), "self-similarity must peak at the query patch");
    assert!((best_v - 1.0).abs() < 1e-9, "self-similarity is {best_v}");
    // And the rendered heatmap's brightest pixel falls inside that cell.
    let img = image::open(sim.join("sim_000.png")).unwrap().to_rgb8();
    let (mut bx, mut by, mut bsum) = (0u32, 0u32, 0u32);
    for (x, y, p) in img.enumerate_pixels() {
        let s = p.0.iter().map(|&v| v as u32).sum::<u32>();
        if s > bsum {
            (bx, by, bsum) = (x, y, s);
        }
    }
    assert_eq!((by / 16, bx / 16), (1, 1), "brightest pixel outside the query cell");
}

#[test]
fn plot_empty_log_exits_2_and_two_logs_overlay() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "step,dino,ibot,reg,total,lr,m,probe_metric\n").unwrap();
    let out = dir.path().join("c.png");
    let res = bin()
        .args(["plot", "--log", empty.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(res.status.code().unwrap(), 2);
    assert!(!String::from_utf8_lossy(&res.stderr).is_empty(), "expected a message on stderr");

    let data = gen_data(dir.path());
    let cfg = write_config(dir.path(), 3, 0);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out_dir in [&a, &b] {
        run_ok(&[
            "pretrain",
            "--config",
            cfg.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
    }
    run_ok(&[
        "plot",
        "--log",
        a.join("trainlog.csv").to_str().unwrap(),
        "--log",
        b.join("trainlog.csv").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(fs::read(&out).unwrap().len() > 1000);
}
