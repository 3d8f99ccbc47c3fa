//! The `calib` binary: golden result files and exit codes.
//!
//! Set `UPDATE_GOLDEN=1` to rewrite the files under `tests/golden`.

use std::path::{Path, PathBuf};
use std::process::Command;

use vical::config::NbvGridConfig;
use vical::guidance::{build_nbv_grid, NbtName};
use vical::sim::{RigSpec, Script, ScriptStep};

fn calib(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_calib")).args(args).output().unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn ok(args: &[&str]) {
    let (code, err) = calib(args);
    assert_eq!(code, 0, "calib {args:?} failed: {err}");
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_script(path: &Path, script: &Script) {
    std::fs::write(path, serde_json::to_string_pretty(script).unwrap()).unwrap();
}

fn views_script() -> Script {
    let rig = RigSpec::default_stereo();
    let grid = build_nbv_grid(&rig.target, &NbvGridConfig::default());
    let mut steps = Vec::new();
    for id in [2, 9, 16, 23, 31, 48, 62, 70, 88, 101, 117, 134] {
        let eye = grid[id].pose.translation();
        steps.push(ScriptStep::MoveTo {
            eye: [eye.x, eye.y, eye.z],
            look_at: None,
            duration: 1.0,
        });
        steps.push(ScriptStep::Hold { duration: 0.2 });
    }
    Script { steps }
}

fn golden(name: &str, produced: &Path) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    let text = std::fs::read_to_string(produced).unwrap();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, &text).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e}; run with UPDATE_GOLDEN=1 to create it", path.display()));
    assert!(text == expected, "{name} differs from its golden file");
}

#[test]
fn offline_pipeline_matches_golden_results() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_script(&d.join("views.json"), &views_script());
    let mut steps = vec![ScriptStep::Hold { duration: 1.0 }];
    steps.extend([NbtName::VertFig8, NbtName::HorizFig8].map(|name| ScriptStep::Nbt { name }));
    steps.push(ScriptStep::Hold { duration: 1.0 });
    write_script(&d.join("nbt.json"), &Script { steps });

    let (cam_data, vi_data) = (d.join("cam"), d.join("vi"));
    ok(&["simulate", "--script", s(&d.join("views.json")), "--seed", "21", "--out", s(&cam_data)]);
    ok(&["simulate", "--script", s(&d.join("nbt.json")), "--seed", "22", "--out", s(&vi_data)]);
    assert!(vi_data.join("imu.csv").exists() && vi_data.join("cam1/detections.csv").exists());
    assert!(vi_data.join("rig_truth.json").exists());

    let cam = d.join("camera_result.json");
    ok(&["camera", "--dataset", s(&cam_data), "--out", s(&cam)]);
    golden("camera_result.json", &cam);
    let imu = d.join("imu_result.json");
    ok(&["imu", "--dataset", s(&vi_data), "--camera-result", s(&cam), "--out", s(&imu)]);
    golden("imu_result.json", &imu);

    // the outputs parse back into the result schema
    let res = vical::calib::CalibResult::read(&imu).unwrap();
    assert!(res.time_delay.is_some() && res.sensor_camera.is_some());
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    // a static recording sees the target from one viewpoint only
    ok(&["simulate", "--out", s(&d.join("static"))]);
    let (code, err) = calib(&["camera", "--dataset", s(&d.join("static")), "--out", s(&d.join("r.json"))]);
    assert_eq!(code, 2, "{err}");

    let (code, _) = calib(&["camera", "--dataset", s(&d.join("missing")), "--out", s(&d.join("r.json"))]);
    assert_eq!(code, 3);

    std::fs::write(d.join("bad.json"), "{\"info_threshold\": -1}").unwrap();
    let (code, err) = calib(&[
        "camera",
        "--dataset",
        s(&d.join("static")),
        "--config",
        s(&d.join("bad.json")),
        "--out",
        s(&d.join("r.json")),
    ]);
    assert_eq!(code, 3);
    assert!(err.contains("info_threshold"), "{err}");

    std::fs::write(d.join("typo.json"), "{\"info_treshold\": 0.3}").unwrap();
    let (code, _) = calib(&["simulate", "--config", s(&d.join("typo.json")), "--out", s(&d.join("x"))]);
    assert_eq!(code, 3);

    let (code, _) = calib(&["session", "run", "--mode", "replay", "--dataset", s(&d.join("static"))]);
    assert_eq!(code, 3, "a dataset without a session record cannot be replayed");
}

#[test]
fn session_replay_reproduces_result_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (rec, live, again) = (d.join("rec"), d.join("live"), d.join("again"));
    let events = d.join("events.ndjson");
    ok(&[
        "session", "run", "--mode", "sim", "--plan", "camera-only", "--seed", "3",
        "--record", s(&rec), "--out", s(&live), "--events", s(&events),
    ]);
    ok(&["session", "run", "--mode", "replay", "--dataset", s(&rec), "--out", s(&again)]);
    let a = std::fs::read(live.join("camera_result.json")).unwrap();
    let b = std::fs::read(again.join("camera_result.json")).unwrap();
    assert!(a == b, "replayed result differs");
    assert!(!live.join("imu_result.json").exists());
    let log = std::fs::read_to_string(&events).unwrap();
    let last = log.lines().last().unwrap();
    assert!(last.contains("\"DONE\""), "{last}");
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["v"], 1);
    }
}
