use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::thread::sleep;
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pointplanes"));
    c.env_remove("RUST_LOG");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Stderr of a failing command, which must be one `error: kind=...` line.
fn fails(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with("error: kind="), "{err}");
    lines[0].to_owned()
}

fn write_json(path: &Path, v: &Value) {
    fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn tiny_arch() -> Value {
    json!({"enc1": 4, "enc2": 4, "bottleneck": 4, "dec1": 4, "dec2": 4})
}

/// 16×16 box-plane scene with view 2 held out.
fn scene(dir: &Path) -> PathBuf {
    write_json(
        &dir.join("bench.json"),
        &json!({"scene": "box-plane", "resolution": [16, 16], "points_per_view": 120,
                "held_out": [2], "sample_seed": 3}),
    );
    ok(dir, &["gen-scene", "bench.json", "--out", "scene"]);
    dir.join("scene")
}

fn run_config(dir: &Path, name: &str, epochs: usize, max_steps: Option<u64>) -> PathBuf {
    let mut cfg = json!({
        "scene_dir": "scene",
        "train": {"epochs": epochs, "planes": 4, "architecture": tiny_arch(), "seed": 11}
    });
    if let Some(m) = max_steps {
        cfg["max_steps"] = json!(m);
    }
    let path = dir.join(name);
    write_json(&path, &cfg);
    path
}

fn log_lines(path: &Path) -> usize {
    fs::read_to_string(path).map(|s| s.lines().count()).unwrap_or(0)
}

fn wait_for_lines(child: &mut Child, log: &Path, n: usize) {
    let start = Instant::now();
    while log_lines(log) < n {
        assert!(child.try_wait().unwrap().is_none(), "training exited early");
        assert!(start.elapsed() < Duration::from_secs(120), "no progress");
        sleep(Duration::from_millis(20));
    }
}

fn assert_config_recorded(dir: &Path) {
    assert!(dir.join("config.json").is_file(), "{dir:?}");
    let hash = fs::read_to_string(dir.join("config.sha256")).unwrap();
    assert_eq!(hash.trim().len(), 64);
}

#[test]
fn gen_scene_outputs_are_complete_and_reproducible() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let scene = scene(dir);
    assert_config_recorded(&scene);
    let views: Vec<String> = fs::read_dir(scene.join("views"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(views.iter().filter(|v| v.ends_with(".png")).count(), 8);
    assert_eq!(views.iter().filter(|v| v.ends_with(".pfm")).count(), 8);
    let split = read_json(&scene.join("split.json"));
    assert_eq!(split["held_out"], json!([2]));
    assert_eq!(read_json(&scene.join("cameras.json")).as_array().unwrap().len(), 8);

    ok(dir, &["gen-scene", "bench.json", "--out", "again"]);
    assert_eq!(
        fs::read(scene.join("cloud.ply")).unwrap(),
        fs::read(dir.join("again/cloud.ply")).unwrap()
    );

    let err = fails(dir, &["gen-scene", "bench.json", "--out", "scene"]);
    assert!(err.starts_with("error: kind=exists"), "{err}");
    ok(dir, &["gen-scene", "bench.json", "--out", "scene", "--force"]);
}

#[test]
fn gen_scene_from_canned_id() {
    let tmp = TempDir::new().unwrap();
    let out = ok(tmp.path(), &["gen-scene", "--scene", "desk", "--out", "desk"]);
    assert!(out.contains("12 views"), "{out}");
    let err = fails(tmp.path(), &["gen-scene", "--scene", "nope", "--out", "x"]);
    assert!(err.contains("kind=unknown-scene"), "{err}");
}

#[test]
fn missing_spec_names_the_path() {
    let tmp = TempDir::new().unwrap();
    let err = fails(tmp.path(), &["gen-scene", "no_such_spec.json", "--out", "x"]);
    assert!(err.contains("kind=io"), "{err}");
    assert!(err.contains("no_such_spec.json"), "{err}");
}

#[test]
fn usage_errors_are_one_line() {
    let tmp = TempDir::new().unwrap();
    let out = run(tmp.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error: kind=usage"), "{err}");
}

#[test]
fn thread_cap_must_be_a_positive_integer() {
    let tmp = TempDir::new().unwrap();
    let out = bin()
        .current_dir(tmp.path())
        .env("POINTPLANES_THREADS", "0")
        .args(["gen-scene", "--scene", "box-plane", "--out", "s"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("POINTPLANES_THREADS"));
    let out = bin()
        .current_dir(tmp.path())
        .env("POINTPLANES_THREADS", "1")
        .args(["gen-scene", "--scene", "box-plane", "--out", "s"])
        .output()
        .unwrap();
    assert!(out.status.success());
}

#[test]
fn fifty_step_smoke_run_logs_fifty_records() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    scene(dir);
    run_config(dir, "run.json", 100, Some(50));
    ok(dir, &["train", "run.json", "--out", "run"]);
    assert_config_recorded(&dir.join("run"));
    let log = fs::read_to_string(dir.join("run/log.jsonl")).unwrap();
    let records: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 50);
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r["step"], json!(i as u64 + 1));
        assert!(r["loss"].as_f64().unwrap().is_finite());
    }
    assert!(dir.join("run/checkpoint.ckpt").is_file());
    assert_eq!(read_json(&dir.join("run/summary.json"))["step"], json!(50));
}

#[test]
fn resume_continues_like_an_uninterrupted_run() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    scene(dir);
    run_config(dir, "full.json", 2, None);
    ok(dir, &["train", "full.json", "--out", "full"]);

    run_config(dir, "part.json", 2, Some(5));
    ok(dir, &["train", "part.json", "--out", "part", "--checkpoint-every", "2"]);
    run_config(dir, "part.json", 2, None);
    ok(dir, &["train", "part.json", "--out", "part", "--resume"]);

    assert_eq!(
        fs::read(dir.join("full/checkpoint.ckpt")).unwrap(),
        fs::read(dir.join("part/checkpoint.ckpt")).unwrap()
    );
    assert_eq!(
        fs::read_to_string(dir.join("full/log.jsonl")).unwrap(),
        fs::read_to_string(dir.join("part/log.jsonl")).unwrap()
    );

    let mut other = read_json(&dir.join("part.json"));
    other["train"]["seed"] = json!(12);
    write_json(&dir.join("other.json"), &other);
    let err = fails(dir, &["train", "other.json", "--out", "part", "--resume"]);
    assert!(err.contains("kind=config"), "{err}");
}

fn stop_with(dir: &Path, out: &str, stop: impl FnOnce(&Child)) {
    run_config(dir, "long.json", 10_000, None);
    let mut child = bin()
        .current_dir(dir)
        .args(["train", "long.json", "--out", out])
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let log = dir.join(out).join("log.jsonl");
    wait_for_lines(&mut child, &log, 3);
    stop(&child);
    let status = child.wait().unwrap();
    assert!(status.success(), "{status:?}");
    let summary = read_json(&dir.join(out).join("summary.json"));
    assert_eq!(summary["stopped"], json!(true));
    let steps = log_lines(&log) as u64;
    assert!(steps >= 3);
    assert_eq!(summary["step"], json!(steps));
    assert!(!dir.join(out).join("STOP").exists());

    let ckpt = dir.join(out).join("checkpoint.ckpt");
    let eval = ok(
        dir,
        &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--scene-dir", "scene", "--out", &format!("{out}_eval")],
    );
    assert!(eval.contains("mean"));
}

#[test]
fn stop_file_flushes_a_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    scene(dir);
    stop_with(dir, "run", |_| fs::write(dir.join("run/STOP"), "").unwrap());
}

#[test]
fn interrupt_flushes_a_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    scene(dir);
    stop_with(dir, "run", |child| {
        let status = Command::new("kill")
            .args(["-INT", &child.id().to_string()])
            .status()
            .unwrap();
        assert!(status.success());
    });
}

#[test]
fn empty_view_names_the_camera() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    scene(dir);
    fs::write(
        dir.join("far.ply"),
        "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\n\
         property float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\n\
         end_header\n0 0 100 255 0 0\n",
    )
    .unwrap();
    let mut cfg = read_json(&run_config(dir, "run.json", 1, None));
    cfg["cloud"] = json!("far.ply");
    write_json(&dir.join("run.json"), &cfg);
    let err = fails(dir, &["train", "run.json", "--out", "run"]);
    assert!(err.contains("kind=empty-view"), "{err}");
    assert!(err.contains("camera 0"), "{err}");
}

#[test]
fn render_is_deterministic_and_checks_compatibility() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let scene = scene(dir);
    run_config(dir, "run.json", 1, None);
    ok(dir, &["train", "run.json", "--out", "run"]);
    let cams = read_json(&scene.join("cameras.json"));
    write_json(&dir.join("cam.json"), &cams[2]);

    ok(dir, &["render", "run/checkpoint.ckpt", "cam.json", "--out", "a", "--pfm"]);
    ok(dir, &["render", "run/checkpoint.ckpt", "cam.json", "--out", "b", "--pfm", "--config", "run.json"]);
    assert_config_recorded(&dir.join("a"));
    assert!(dir.join("a/render.png").is_file());
    assert_eq!(
        fs::read(dir.join("a/render.pfm")).unwrap(),
        fs::read(dir.join("b/render.pfm")).unwrap()
    );

    let mut wide = read_json(&dir.join("run.json"));
    wide["train"]["architecture"]["enc1"] = json!(8);
    write_json(&dir.join("wide.json"), &wide);
    let err = fails(dir, &["render", "run/checkpoint.ckpt", "cam.json", "--out", "c", "--config", "wide.json"]);
    assert!(err.contains("kind=incompatible"), "{err}");

    fs::write(dir.join("junk.ckpt"), b"not a checkpoint").unwrap();
    let err = fails(dir, &["render", "junk.ckpt", "cam.json", "--out", "d"]);
    assert!(err.contains("kind=format"), "{err}");
}

/// Parses the text table into `(label, psnr, ssim)` rows.
fn text_rows(text: &str) -> Vec<(String, f64, f64)> {
    text.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            (f[0].to_owned(), f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect()
}

#[test]
fn eval_of_oracles_against_themselves() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    scene(dir);
    let views: Vec<String> = (0..3).map(|i| format!("scene/views/view_{i:03}.pfm")).collect();
    let mut args = vec!["eval", "--out", "e", "--predictions"];
    args.extend(views.iter().map(String::as_str));
    args.push("--targets");
    args.extend(views.iter().map(String::as_str));
    ok(dir, &args);
    assert_config_recorded(&dir.join("e"));

    let table = read_json(&dir.join("e/metrics.json"));
    let rows = table["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    for r in rows {
        assert_eq!(r["psnr"], json!(99.0));
        assert_eq!(r["ssim"], json!(1.0));
    }
    let text = text_rows(&fs::read_to_string(dir.join("e/metrics.txt")).unwrap());
    assert_eq!(text.len(), rows.len() + 1);
    for (r, t) in rows.iter().zip(&text) {
        assert_eq!(t.0, r["view"].to_string());
        assert_eq!(t.1, r["psnr"].as_f64().unwrap());
        assert_eq!(t.2, r["ssim"].as_f64().unwrap());
    }
}

#[test]
fn eval_tables_agree_for_a_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    scene(dir);
    run_config(dir, "run.json", 1, None);
    ok(dir, &["train", "run.json", "--out", "run"]);
    ok(
        dir,
        &["eval", "--checkpoint", "run/checkpoint.ckpt", "--scene-dir", "scene", "--views", "0,2,5", "--out", "e"],
    );
    let table = read_json(&dir.join("e/metrics.json"));
    let rows = table["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    let text = text_rows(&fs::read_to_string(dir.join("e/metrics.txt")).unwrap());
    for (r, t) in rows.iter().zip(&text) {
        assert_eq!(t.1, r["psnr"].as_f64().unwrap());
        assert_eq!(t.2, r["ssim"].as_f64().unwrap());
    }
    let mean = text.last().unwrap();
    assert_eq!(mean.0, "mean");
    assert_eq!(mean.1, table["mean"]["psnr"].as_f64().unwrap());
    assert!(dir.join("e/view_005.png").is_file());

    ok(dir, &["eval", "--checkpoint", "run/checkpoint.ckpt", "--scene-dir", "scene", "--out", "held"]);
    let held = read_json(&dir.join("held/metrics.json"));
    assert_eq!(held["rows"].as_array().unwrap().len(), 1);
    assert_eq!(held["rows"][0]["view"], json!(2));
}

#[test]
fn compare_emits_a_reproducible_grid() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    write_json(
        &dir.join("cmp.json"),
        &json!({
            "compare": {
                "benchmark": {"scene": "box-plane", "resolution": [16, 16], "points_per_view": 120,
                              "held_out": [2, 5]},
                "train": {"epochs": 1, "planes": 2, "architecture": tiny_arch()},
                "densities": [1.0, 0.5, 0.25]
            }
        }),
    );
    let text = ok(dir, &["compare", "cmp.json", "--out", "a"]);
    ok(dir, &["compare", "cmp.json", "--out", "b"]);
    assert_config_recorded(&dir.join("a"));
    let grid = read_json(&dir.join("a/grid.json"));
    assert_eq!(grid.as_array().unwrap().len(), 9);
    assert_eq!(grid, read_json(&dir.join("b/grid.json")));
    assert_eq!(text.lines().count(), 4, "{text}");
    for method in ["ours", "direct-render", "zbuffer"] {
        assert!(text.lines().next().unwrap().contains(method));
    }
}

#[test]
fn voxelize_dumps_a_readable_volume() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let scene = scene(dir);
    let cams = read_json(&scene.join("cameras.json"));
    write_json(&dir.join("cam.json"), &cams[0]);
    write_json(
        &dir.join("vox.json"),
        &json!({
            "cloud": "scene/cloud.ply",
            "camera": "cam.json",
            "options": {"planes": 4, "params": {"a": 1.0, "b": 1.0},
                        "depth_range": {"mode": "fit", "padding": 0.01},
                        "features": "learned", "order": "input"}
        }),
    );
    ok(dir, &["voxelize", "vox.json", "--out", "v"]);
    assert_config_recorded(&dir.join("v"));
    let bytes = fs::read(dir.join("v/volume.bin")).unwrap();
    let volume = pointplanes::voxelizer::read_dump(bytes.as_slice()).unwrap();
    assert_eq!(volume.shape(), &[11, 4, 16, 16]);
    let summary = read_json(&dir.join("v/summary.json"));
    assert!(summary["occupied_voxels"].as_u64().unwrap() > 0);

    write_json(&dir.join("bad.json"), &json!({"camera": "cam.json"}));
    let err = fails(dir, &["voxelize", "bad.json", "--out", "w"]);
    assert!(err.contains("kind=config"), "{err}");
}
