//! Simulator consistency with the measurement models.

mod common;

use nalgebra::Vector3;
use vical::sim::{RigSpec, SimOptions, Simulator};

use common::nbt::{nbt_run, noiseless_nbt_residual};

#[test]
fn static_rig_measures_gravity() {
    let mut rig = RigSpec::default_mono();
    rig.initial_bias = Default::default();
    let start = rig.start_pose();
    let mut sim = Simulator::new(rig.clone(), start, SimOptions { imu_noise: false, ..Default::default() }, 1);
    let (frames, imu) = sim.step(1.0);
    assert_eq!(frames.len(), 16);
    let expect = start.rotation().inverse().rotate(&Vector3::new(0.0, 0.0, 9.81));
    for m in &imu {
        assert!((m.accel - expect).norm() < 1e-12);
        assert_eq!(m.gyro, Vector3::zeros());
    }
    // IMU stamps are camera time shifted by the delay
    let last = imu.last().unwrap().stamp_ns;
    assert!(last as f64 * 1e-9 - rig.time_delay <= 1.0 + 1e-9);
}

#[test]
fn noiseless_nbt_gives_zero_imu_residual() {
    let r = noiseless_nbt_residual(3);
    println!("worst noiseless IMU residual {:e} over {} intervals", r.worst, r.checked);
    // all but the first and last interval of the trajectory
    assert!(r.checked + 2 >= r.intervals, "{} of {}", r.checked, r.intervals);
    assert!(r.worst < 1e-6);
}

#[test]
fn seeded_runs_are_identical() {
    let a = nbt_run(9);
    let b = nbt_run(9);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}

#[test]
fn ground_truth_reprojection_rmse_matches_noise() {
    let (sim, frames, _) = nbt_run(5);
    let rig = sim.rig();
    let mut sum = 0.0;
    let mut n = 0usize;
    for f in &frames {
        let t_ws = sim.kinematics(f.stamp_ns as f64 * 1e-9).pose;
        for o in &f.detections {
            let t_wc = t_ws
                .compose(&rig.sensor_camera)
                .unwrap()
                .compose(&rig.extrinsics[o.camera])
                .unwrap();
            let p = t_wc.inverse().transform_point(&rig.fiducial.transform_point(&rig.target.corner_position(o.corner).unwrap()));
            let px = vical::camera::ProjectionModel::project(&rig.cameras[o.camera], &p).unwrap().pixel;
            sum += (px - o.pixel).norm_squared();
            n += 2;
        }
    }
    let rmse = (sum / n as f64).sqrt();
    println!("ground-truth RMSE {rmse:.4} px over {n} coordinates");
    assert!(n > 10_000);
    assert!((rmse - 1.0).abs() < 0.05);
}
