use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_nerf-reloc"));
    c.args(["--log-level", "warn", "--threads", "1"]);
    c
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("spawn")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn pose_of_frame(manifest: &Path, i: usize) -> String {
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(manifest).unwrap()).unwrap();
    m["frames"][i]["pose"].to_string()
}

#[test]
fn gen_train_localize_render_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&run(
        &["gen", "--views", "6", "--width", "24", "--height", "24", "--samples", "64", "--out", "data"],
        d,
    ));
    assert!(d.join("data/manifest.json").is_file());
    assert!(d.join("data/images/l0_000.png").is_file());

    ok(&run(
        &[
            "--deterministic",
            "train",
            "--data",
            "data/manifest.json",
            "--out",
            "map.nrlf",
            "--iters",
            "20",
            "--rays",
            "64",
            "--samples",
            "16",
            "--lighting",
            "l0",
            "--loss-log",
            "loss.json",
        ],
        d,
    ));
    let losses: Vec<f64> = serde_json::from_str(&std::fs::read_to_string(d.join("loss.json")).unwrap()).unwrap();
    assert_eq!(losses.len(), 20);

    std::fs::write(d.join("gt.json"), pose_of_frame(&d.join("data/manifest.json"), 2)).unwrap();
    ok(&run(
        &[
            "--deterministic",
            "localize",
            "--map",
            "map.nrlf",
            "--image",
            "data/images/l0_002.png",
            "--init-pose",
            "gt.json",
            "--gt-pose",
            "gt.json",
            "--data",
            "data/manifest.json",
            "--iters",
            "5",
            "--rays",
            "64",
            "--samples",
            "16",
            "--report",
            "report.json",
        ],
        d,
    ));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    assert!(report["translation_error"].as_f64().unwrap().is_finite());
    assert!(report.get("wall_time_s").is_none_or(|v| v.is_null()));

    ok(&run(
        &["render", "--map", "map.nrlf", "--pose", "gt.json", "--data", "data/manifest.json", "--out", "r.png"],
        d,
    ));
    let out = run(&["eval", "--a", "data/images/l0_002.png", "--b", "data/images/l0_002.png"], d);
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("PSNR 99.0"), "{text}");
    assert!(text.contains("SSIM 1.0000"), "{text}");
}

#[test]
fn usage_errors_exit_2_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["gen", "--bogus", "--out", "data"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("data").exists());

    let out = run(&["ablate", "--map", "m", "--data", "d", "--grid", "q:1", "--report", "r"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn domain_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["eval", "--a", "missing.png", "--b", "missing.png"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn normalize_directory() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&run(
        &["gen", "--views", "2", "--width", "32", "--height", "32", "--samples", "32", "--out", "data"],
        d,
    ));
    ok(&run(&["normalize", "--in", "data/images", "--out", "norm"], d));
    assert_eq!(std::fs::read_dir(d.join("norm")).unwrap().count(), 6);
    ok(&run(
        &["normalize", "--in", "data/images", "--out", "oracle", "--oracle-masks", "data/masks"],
        d,
    ));
    let out = run(&["eval", "--a", "oracle/l1_000.png", "--b", "data/images/l0_000.png"], d);
    ok(&out);
}
