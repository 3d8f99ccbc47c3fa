//! The C ABI driven from Rust the way a C caller would use it.

use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use vical::config::{NbtConfig, NbvGridConfig};
use vical::guidance::build_nbv_grid;
use vical::sim::{RigSpec, Script, ScriptStep, SimOptions};
use vical_ffi::*;

fn c_path(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = vical_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn write_views(dir: &Path, views: &[usize]) {
    let rig = RigSpec::default_stereo();
    let grid = build_nbv_grid(&rig.target, &NbvGridConfig::default());
    let mut steps = Vec::new();
    for &id in views {
        let eye = grid[id].pose.translation();
        steps.push(ScriptStep::MoveTo {
            eye: [eye.x, eye.y, eye.z],
            look_at: None,
            duration: 1.0,
        });
        steps.push(ScriptStep::Hold { duration: 0.2 });
    }
    let ds = Script { steps }.run(&rig, &NbtConfig::default(), SimOptions::default(), 11);
    ds.write(dir).unwrap();
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(vical_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn camera_calibration_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    write_views(dir.path(), &[2, 9, 16, 23, 31, 48, 62, 70, 88, 101, 117, 134]);
    unsafe {
        let cfg = vical_config_default();
        let mut ds = ptr::null_mut();
        assert_eq!(vical_dataset_read(c_path(dir.path()).as_ptr(), &mut ds), VicalStatus::Ok);
        assert!(vical_dataset_frame_count(ds) > 12);
        assert!(vical_dataset_imu_count(ds) > 0);

        let mut res = ptr::null_mut();
        assert_eq!(vical_calibrate_cameras(cfg, ds, &mut res), VicalStatus::Ok);
        assert_eq!(vical_result_camera_count(res), 2);
        let truth = RigSpec::default_stereo();
        let mut k = [0.0; VICAL_INTRINSICS_LEN];
        assert_eq!(vical_result_intrinsics(res, 1, k.as_mut_ptr()), VicalStatus::Ok);
        assert!((k[0] / truth.cameras[1].fx - 1.0).abs() < 5e-3);
        let mut pose = [0.0; VICAL_POSE_LEN];
        assert_eq!(vical_result_extrinsic(res, 1, pose.as_mut_ptr()), VicalStatus::Ok);
        let t = truth.extrinsics[1].translation();
        assert!((pose[0] - t.x).abs() < 5e-3);
        assert_eq!(vical_result_extrinsic(res, 2, pose.as_mut_ptr()), VicalStatus::InvalidArgument);
        assert_eq!(vical_result_sensor_camera(res, pose.as_mut_ptr()), VicalStatus::Unavailable);
        let mut td = 0.0;
        assert_eq!(vical_result_time_delay(res, &mut td), VicalStatus::Unavailable);
        assert!(last_error().contains("camera-IMU"));
        let (mut h, mut rmse) = (0.0, 0.0);
        assert_eq!(vical_result_metrics(res, &mut h, &mut rmse), VicalStatus::Ok);
        assert!(h.is_finite() && (rmse - 1.0).abs() < 0.2);

        // write, read back and compare the JSON
        let file = dir.path().join("camera.json");
        assert_eq!(vical_result_write(res, c_path(&file).as_ptr()), VicalStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(vical_result_read(c_path(&file).as_ptr(), &mut back), VicalStatus::Ok);
        let (a, b) = (vical_result_to_json(res), vical_result_to_json(back));
        assert_eq!(CStr::from_ptr(a), CStr::from_ptr(b));
        vical_string_free(a);
        vical_string_free(b);

        vical_result_free(back);
        vical_result_free(res);
        vical_dataset_free(ds);
        vical_config_free(cfg);
    }
}

#[test]
fn single_view_reports_unobservable() {
    let dir = tempfile::tempdir().unwrap();
    write_views(dir.path(), &[]);
    unsafe {
        let cfg = vical_config_default();
        let mut ds = ptr::null_mut();
        assert_eq!(vical_dataset_read(c_path(dir.path()).as_ptr(), &mut ds), VicalStatus::Ok);
        let mut res = ptr::null_mut();
        assert_eq!(vical_calibrate_cameras(cfg, ds, &mut res), VicalStatus::Unobservable);
        assert!(res.is_null());
        assert!(!last_error().is_empty());
        vical_dataset_free(ds);
        vical_config_free(cfg);
    }
}

#[test]
fn bad_arguments_are_rejected() {
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(vical_dataset_read(ptr::null(), &mut ds), VicalStatus::InvalidArgument);
        assert_eq!(last_error(), "path is null");
        let missing = CString::new("/nonexistent/vical").unwrap();
        assert_eq!(vical_dataset_read(missing.as_ptr(), &mut ds), VicalStatus::Io);
        let mut cfg = ptr::null_mut();
        assert_eq!(vical_config_load(missing.as_ptr(), &mut cfg), VicalStatus::Io);
        let mut res = ptr::null_mut();
        assert_eq!(
            vical_calibrate_cameras(ptr::null(), ptr::null(), &mut res),
            VicalStatus::InvalidArgument
        );
        assert_eq!(
            vical_simulate_session(ptr::null(), 0, true, &mut res, ptr::null_mut()),
            VicalStatus::InvalidArgument
        );
        let c = vical_config_default();
        assert_eq!(
            vical_simulate_session(c, 0, true, &mut res, ptr::null_mut()),
            VicalStatus::InvalidArgument
        );
        vical_config_free(c);
        assert!(vical_result_to_json(ptr::null()).is_null());
        assert_eq!(vical_result_camera_count(ptr::null()), 0);
        // freeing null is a no-op
        vical_result_free(ptr::null_mut());
        vical_dataset_free(ptr::null_mut());
        vical_config_free(ptr::null_mut());
        vical_string_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/vical.h")).unwrap();
    for name in [
        "typedef struct VicalConfig VicalConfig",
        "typedef struct VicalResult VicalResult",
        "VICAL_STATUS_UNOBSERVABLE = 2",
        "vical_calibrate_imu(",
        "vical_last_error(",
        "#define VICAL_POSE_LEN 7",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
