//! Batch calibration against simulator ground truth.

use vical::calib::{calibrate_cameras, calibrate_imu, CalibError};
use vical::config::{NbtConfig, NbvGridConfig, SessionConfig};
use vical::guidance::{build_nbv_grid, NbtName};
use nalgebra::DVector;
use vical::sim::{Dataset, RigSpec, Script, ScriptStep, SimOptions};

fn view_script(ids: &[usize]) -> Script {
    let rig = RigSpec::default_stereo();
    let grid = build_nbv_grid(&rig.target, &NbvGridConfig::default());
    let mut steps = Vec::new();
    for &id in ids {
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

const VIEWS: [usize; 12] = [2, 9, 16, 23, 31, 48, 62, 70, 88, 101, 117, 134];

fn camera_dataset(pixel_sigma: f64, seed: u64) -> Dataset {
    let mut rig = RigSpec::default_stereo();
    rig.pixel_sigma = pixel_sigma;
    view_script(&VIEWS).run(&rig, &NbtConfig::default(), SimOptions::default(), seed)
}

#[test]
fn noiseless_views_recover_intrinsics_exactly() {
    let ds = camera_dataset(0.0, 1);
    let cfg = SessionConfig::default();
    let res = calibrate_cameras(&cfg.target, &ds.frames(), ds.camera_count(), &cfg).unwrap();
    let truth = ds.truth.unwrap();
    for (est, tru) in res.cameras.iter().zip(&truth.cameras) {
        let d = est.params().iter().zip(tru.params()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d < 1e-6, "intrinsics error {d:e}");
    }
    let (dt, dr) = res.extrinsics[1].error_to(&truth.extrinsics[1]);
    assert!(dt < 1e-8 && dr < 1e-8);
    assert!(res.rmse_px < 1e-6);
}

#[test]
fn noisy_views_recover_intrinsics() {
    let ds = camera_dataset(1.0, 2);
    let cfg = SessionConfig::default();
    let res = calibrate_cameras(&cfg.target, &ds.frames(), ds.camera_count(), &cfg).unwrap();
    let truth = ds.truth.unwrap();
    for (est, tru) in res.cameras.iter().zip(&truth.cameras) {
        assert!((est.fx / tru.fx - 1.0).abs() < 5e-3);
        assert!((est.fy / tru.fy - 1.0).abs() < 5e-3);
        assert!((est.cx - tru.cx).abs() < 1.0 && (est.cy - tru.cy).abs() < 1.0);
        assert!((est.k1 - tru.k1).abs() < 0.01);
    }
    assert!((res.rmse_px - 1.0).abs() < 0.2, "rmse {}", res.rmse_px);
    let cov = res.covariance.to_matrix();
    assert!(cov.clone().cholesky().is_some());
    assert_eq!(cov.nrows(), 22);
    let back: vical::calib::CalibResult = serde_json::from_str(&res.to_json()).unwrap();
    assert_eq!(back, res);
}

#[test]
fn single_view_is_unobservable() {
    let rig = RigSpec::default_stereo();
    let ds = Script::default().run(&rig, &NbtConfig::default(), SimOptions::default(), 3);
    let cfg = SessionConfig::default();
    let err = calibrate_cameras(&cfg.target, &ds.frames(), ds.camera_count(), &cfg).unwrap_err();
    assert!(err.is_unobservable(), "{err}");
}

fn vi_dataset(steps: Vec<ScriptStep>, time_delay: f64, seed: u64) -> Dataset {
    let mut rig = RigSpec::default_stereo();
    rig.time_delay = time_delay;
    let mut all = vec![ScriptStep::Hold { duration: 1.0 }];
    all.extend(steps);
    all.push(ScriptStep::Hold { duration: 1.0 });
    Script { steps: all }.run(&rig, &NbtConfig::default(), SimOptions::default(), seed)
}

/// Camera result carrying the true cameras.
fn true_cameras(rig: &RigSpec) -> vical::calib::CalibResult {
    let ds = camera_dataset(0.0, 1);
    let cfg = SessionConfig::default();
    let mut res = calibrate_cameras(&cfg.target, &ds.frames(), ds.camera_count(), &cfg).unwrap();
    res.cameras = rig.cameras.clone();
    res.extrinsics = rig.extrinsics.clone();
    res
}

/// The estimate must agree with the truth within its own covariance.
#[test]
fn nbt_motion_recovers_imu_extrinsics_and_delay() {
    let steps = NbtName::ALL.into_iter().map(|name| ScriptStep::Nbt { name }).collect();
    let ds = vi_dataset(steps, 0.01, 4);
    let truth = ds.truth.clone().unwrap();
    let cfg = SessionConfig::default();
    let res = calibrate_imu(&cfg.target, &ds.frames(), &ds.imu, &true_cameras(&truth), &cfg).unwrap();
    let est = res.sensor_camera.unwrap();
    let t_d = res.time_delay.unwrap();
    let mut err = DVector::zeros(7);
    err.fixed_rows_mut::<6>(0).copy_from(&est.boxminus(&truth.sensor_camera).unwrap());
    err[6] = t_d - 0.01;
    let cov = res.covariance.to_matrix();
    let d2 = err.dot(&(cov.clone().cholesky().unwrap().solve(&err)));
    // 99.9% quantile of chi-square with 7 degrees of freedom
    assert!(d2 < 24.32, "Mahalanobis distance² {d2}, error {err}");
    let (dt, dr) = est.error_to(&truth.sensor_camera);
    assert!(dt < 0.03 && dr.to_degrees() < 1.0);
    assert!((t_d - 0.01).abs() < 1.5e-3, "t_d {t_d}");
}

#[test]
fn pure_translation_is_insufficient_excitation() {
    let steps = vec![
        ScriptStep::Translate {
            offset: [0.2, 0.0, 0.0],
            duration: 2.0,
        },
        ScriptStep::Translate {
            offset: [0.0, 0.15, 0.1],
            duration: 2.0,
        },
        ScriptStep::Translate {
            offset: [-0.2, -0.15, -0.1],
            duration: 2.0,
        },
    ];
    let ds = vi_dataset(steps, 0.003, 5);
    let truth = ds.truth.clone().unwrap();
    let cfg = SessionConfig::default();
    let cams = true_cameras(&truth);
    let frames = ds.frames();
    let err = calibrate_imu(&cfg.target, &frames, &ds.imu, &cams, &cfg).unwrap_err();
    assert!(matches!(err, CalibError::InsufficientExcitation(_)), "{err}");
}
