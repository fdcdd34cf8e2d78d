//! Drives the `spi` binary through a toy end-to-end run.

use std::path::Path;
use std::process::{Command, Output};

use spi_core::io::{read_pfm, read_png_rgb};

fn spi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spi"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn spi")
}

fn ok(args: &[&str]) -> String {
    let out = spi(args);
    assert!(
        out.status.success(),
        "spi {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn toy_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    ok(&["gen-data", "--scenes", "2", "--views", "-60,0,60:10", "--asymmetry", "0-0.5", "--resolution", "32", "--out", s(&data)]);
    for f in ["view_002.png", "depth_002.pfm", "mask_002.png"] {
        assert!(data.join("scene_001").join(f).exists(), "{f}");
    }

    let pre_cfg = root.join("pretrain.json");
    std::fs::write(
        &pre_cfg,
        r#"{"shape": {"levels": [[6, 3], [10, 3]], "channels": 4}, "samples": 16}"#,
    )
    .unwrap();
    let prior = root.join("prior.spi");
    ok(&["pretrain", "--data", s(&data), "--out", s(&prior), "--config", s(&pre_cfg), "--steps", "4", "--resolution", "32"]);
    assert!(prior.exists());

    let inv_cfg = root.join("invert.json");
    std::fs::write(
        &inv_cfg,
        r#"{"stage1_steps": 3, "stage2_steps": 2, "resolution": 32, "samples": 16,
            "bank_size": 2, "log_every": 0, "depth_batch": 2}"#,
    )
    .unwrap();
    let results = root.join("results");
    let out = results.join("no-warp").join("scene_000").join("view_002");
    ok(&[
        "invert", "--scene", s(&data.join("scene_000")), "--view", "2", "--prior", s(&prior), "--config", s(&inv_cfg),
        "--out", s(&out), "--seed", "4", "--no-warp",
    ]);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["flags"]["no_warp"], true);
    assert_eq!(summary["source_bank"], 0);

    let png = root.join("side.png");
    let pfm = root.join("side.pfm");
    ok(&[
        "render", "--checkpoint", s(&out.join("checkpoint.spi")), "--yaw", "-30", "--resolution", "24", "--out", s(&png),
        "--depth", s(&pfm),
    ]);
    assert_eq!(read_png_rgb(&png).unwrap().width, 24);
    assert!(read_pfm(&pfm).unwrap().data.iter().all(|d| d.is_finite()));

    let pseudo = root.join("pseudo");
    ok(&["warp", "--scene", s(&data.join("scene_000")), "--view", "2", "--prior", s(&prior), "--config", s(&inv_cfg), "--out", s(&pseudo)]);
    let poses: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(pseudo.join("poses.json")).unwrap()).unwrap();
    // Yaw 60 has a positive mirror weight, so both sides are populated.
    assert_eq!(poses.as_array().unwrap().len(), 4);
    assert!(pseudo.join("mirror_001_mask.png").exists());

    let report = root.join("report");
    let table = ok(&["eval", "--results", s(&results), "--data", s(&data), "--views", "2", "--out", s(&report)]);
    assert!(table.contains("no-warp"), "{table}");
    assert!(table.contains("skipped"), "scene 1 was never inverted:\n{table}");
    assert!(report.join("report.json").exists() && report.join("report.csv").exists());
}

#[test]
fn gradcheck_reports_every_term() {
    let out = ok(&["gradcheck", "--seed", "2"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    let entries = v.as_array().unwrap();
    assert_eq!(entries.len(), 8);
    assert!(entries.iter().all(|e| e["passed"] == true));
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = spi(&["gen-data", "--asymmetry", "zero", "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad asymmetry"));

    let missing = dir.path().join("nope.spi");
    let out = spi(&["render", "--checkpoint", s(&missing), "--out", s(&dir.path().join("x.png"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.spi"));

    let out = Command::new(env!("CARGO_BIN_EXE_spi"))
        .args(["gradcheck"])
        .env("SPI_THREADS", "0")
        .output()
        .unwrap();
    assert!(!out.status.success());
}
