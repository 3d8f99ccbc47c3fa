//! Analytic Jacobians against central finite differences on the manifold.
//! Each check returns the worst relative error over its random instances.

use nalgebra::{DMatrix, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vical::camera::{CameraIntrinsics, ProjectionModel};
use vical::factors::{CameraReprojection, ImuFactor, ViReprojection};
use vical::geometry::{Frame, Pose, Quat};
use vical::imu::{preintegrate, ImuBias, ImuBuffer, ImuMeasurement, ImuNoiseParams, SensorState};
use vical::solver::{BlockId, BlockKind, Factor};

const STEP: f64 = 1e-6;

fn rand_vec3(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
    Vector3::new(rng.gen_range(-s..s), rng.gen_range(-s..s), rng.gen_range(-s..s))
}

fn rand_quat(rng: &mut ChaCha8Rng) -> Quat {
    Quat::exp(&rand_vec3(rng, 3.0))
}

/// Relative error `‖A − B‖_max / max(‖A‖_max, floor)`.
fn rel_err(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>, floor: f64) -> f64 {
    (analytic - numeric).amax() / analytic.amax().max(floor)
}

/// Central differences of the factor residual w.r.t. block `k`.
fn numeric_jacobian(f: &dyn Factor, params: &[Vec<f64>], kinds: &[BlockKind], k: usize, h: f64) -> DMatrix<f64> {
    let n = kinds[k].tangent_dim();
    let eval = |p: &[Vec<f64>]| {
        let slices: Vec<&[f64]> = p.iter().map(Vec::as_slice).collect();
        f.evaluate(&slices, &vec![false; p.len()]).unwrap().residual
    };
    let mut j = DMatrix::zeros(f.residual_dim(), n);
    for c in 0..n {
        let mut d = vec![0.0; n];
        d[c] = h;
        let mut plus = params.to_vec();
        plus[k] = kinds[k].plus(&params[k], &d);
        d[c] = -h;
        let mut minus = params.to_vec();
        minus[k] = kinds[k].plus(&params[k], &d);
        j.set_column(c, &((eval(&plus) - eval(&minus)) / (2.0 * h)));
    }
    j
}

fn analytic_jacobians(f: &dyn Factor, params: &[Vec<f64>]) -> Vec<DMatrix<f64>> {
    let slices: Vec<&[f64]> = params.iter().map(Vec::as_slice).collect();
    f.evaluate(&slices, &vec![true; params.len()])
        .unwrap()
        .jacobians
        .into_iter()
        .map(Option::unwrap)
        .collect()
}

fn random_intrinsics(rng: &mut ChaCha8Rng) -> CameraIntrinsics {
    CameraIntrinsics {
        fx: rng.gen_range(300.0..700.0),
        fy: rng.gen_range(300.0..700.0),
        cx: rng.gen_range(300.0..340.0),
        cy: rng.gen_range(220.0..260.0),
        k1: rng.gen_range(-0.3..0.3),
        k2: rng.gen_range(-0.05..0.05),
        p1: rng.gen_range(-1e-3..1e-3),
        p2: rng.gen_range(-1e-3..1e-3),
        width: 640,
        height: 480,
    }
}

pub fn projection_jacobians(trials: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let cam = random_intrinsics(&mut rng);
        let p = Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.4..0.4), rng.gen_range(0.5..3.0));
        let (_, jp, ji) = cam.project_jacobians(&p).unwrap();
        let mut np = DMatrix::zeros(2, 3);
        for c in 0..3 {
            let mut e = Vector3::zeros();
            e[c] = STEP;
            let d = (cam.project(&(p + e)).unwrap().pixel - cam.project(&(p - e)).unwrap().pixel) / (2.0 * STEP);
            np.set_column(c, &d);
        }
        let mut ni = DMatrix::zeros(2, 8);
        let base = cam.params();
        for c in 0..8 {
            let (mut a, mut b) = (base, base);
            a[c] += STEP;
            b[c] -= STEP;
            let d = (cam.with_params(&a).project(&p).unwrap().pixel - cam.with_params(&b).project(&p).unwrap().pixel)
                / (2.0 * STEP);
            ni.set_column(c, &d);
        }
        let jp = DMatrix::from_column_slice(2, 3, jp.as_slice());
        let ji = DMatrix::from_column_slice(2, 8, ji.as_slice());
        worst = worst.max(rel_err(&jp, &np, 1.0)).max(rel_err(&ji, &ni, 1.0));
    }
    worst
}

/// Camera pose looking roughly at the target origin from `dist`.
fn random_view(rng: &mut ChaCha8Rng) -> (Pose, Vector3<f64>) {
    let corner = Vector3::new(rng.gen_range(0.0..0.6), rng.gen_range(0.0..0.6), 0.0);
    let eye = Vector3::new(rng.gen_range(-0.3..0.9), rng.gen_range(-0.3..0.9), rng.gen_range(0.5..1.5));
    let r = vical::geometry::look_at(&eye, &Vector3::new(0.3, 0.3, 0.0), &Vector3::x());
    let wobble = Quat::exp(&rand_vec3(rng, 0.1)).to_matrix();
    (Pose::from_matrix(Frame::Fiducial, Frame::Camera(0), &(r * wobble), eye), corner)
}

pub fn camera_reprojection_jacobians(trials: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < trials {
        let cam = random_intrinsics(&mut rng);
        let (t_fc, corner) = random_view(&mut rng);
        let stereo = checked % 2 == 1;
        let ext = Pose::new(
            Frame::Camera(0),
            Frame::Camera(1),
            Quat::exp(&rand_vec3(&mut rng, 0.05)),
            rand_vec3(&mut rng, 0.1),
        );
        let ids = [BlockId(0), BlockId(1), BlockId(2)];
        let pixel = Vector2::new(rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0));
        let (f, params, kinds) = if stereo {
            (
                CameraReprojection::new(ids[0], Some(ids[1]), ids[2], cam, corner, pixel, 1.0, Some(1.5)),
                vec![t_fc.to_params().to_vec(), ext.to_params().to_vec(), cam.params().to_vec()],
                vec![BlockKind::Pose, BlockKind::Pose, BlockKind::Euclidean(8)],
            )
        } else {
            (
                CameraReprojection::new(ids[0], None, ids[2], cam, corner, pixel, 1.0, Some(1.5)),
                vec![t_fc.to_params().to_vec(), cam.params().to_vec()],
                vec![BlockKind::Pose, BlockKind::Euclidean(8)],
            )
        };
        let slices: Vec<&[f64]> = params.iter().map(Vec::as_slice).collect();
        if f.evaluate(&slices, &vec![false; params.len()]).is_err() {
            continue;
        }
        let analytic = analytic_jacobians(&f, &params);
        for (k, a) in analytic.iter().enumerate() {
            let n = numeric_jacobian(&f, &params, &kinds, k, STEP);
            worst = worst.max(rel_err(a, &n, 1.0));
        }
        checked += 1;
    }
    worst
}

pub fn vi_reprojection_jacobians(trials: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < trials {
        let cam = random_intrinsics(&mut rng);
        let (t_fc, corner) = random_view(&mut rng);
        let t_wf = Pose::new(Frame::World, Frame::Fiducial, rand_quat(&mut rng), rand_vec3(&mut rng, 2.0));
        let t_sc = Pose::new(
            Frame::Sensor,
            Frame::Camera(0),
            Quat::exp(&rand_vec3(&mut rng, 2.0)),
            rand_vec3(&mut rng, 0.1),
        );
        let t_c1ci = Pose::new(
            Frame::Camera(0),
            Frame::Camera(1),
            Quat::exp(&rand_vec3(&mut rng, 0.05)),
            rand_vec3(&mut rng, 0.1),
        );
        // sensor pose consistent with the camera view
        let t_fc_used = if checked % 2 == 0 { t_fc } else { t_fc.compose(&t_c1ci.inverse().relabel(Frame::Camera(0), Frame::Camera(0))).unwrap() };
        let t_ws = t_wf
            .compose(&t_fc_used)
            .unwrap()
            .compose(&t_sc.inverse())
            .unwrap();
        let state = SensorState {
            p_ws: *t_ws.translation(),
            q_ws: *t_ws.rotation(),
            v_ws: rand_vec3(&mut rng, 1.0),
            b_g: rand_vec3(&mut rng, 0.01),
            b_a: rand_vec3(&mut rng, 0.1),
        };
        let pixel = Vector2::new(rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0));
        let ext = if checked % 2 == 0 { Pose::identity(Frame::Camera(0), Frame::Camera(0)) } else { t_c1ci };
        let f = ViReprojection::new(BlockId(0), BlockId(1), BlockId(2), &ext, cam, corner, pixel, 1.0, Some(1.5));
        let params = vec![state.to_params().to_vec(), t_wf.to_params().to_vec(), t_sc.to_params().to_vec()];
        let kinds = [BlockKind::SensorState, BlockKind::Pose, BlockKind::Pose];
        let slices: Vec<&[f64]> = params.iter().map(Vec::as_slice).collect();
        if f.evaluate(&slices, &[false; 3]).is_err() {
            continue;
        }
        let analytic = analytic_jacobians(&f, &params);
        for (k, a) in analytic.iter().enumerate() {
            let n = numeric_jacobian(&f, &params, &kinds, k, STEP);
            worst = worst.max(rel_err(a, &n, 1.0));
        }
        checked += 1;
    }
    worst
}

/// Smooth random IMU stream at 400 Hz.
fn random_stream(rng: &mut ChaCha8Rng) -> ImuBuffer {
    let (wa, wf) = (rand_vec3(rng, 1.0), rand_vec3(rng, 3.0));
    let (aa, af) = (rand_vec3(rng, 2.0), rand_vec3(rng, 3.0));
    let a0 = Vector3::new(0.0, 0.0, 9.81) + rand_vec3(rng, 1.0);
    ImuBuffer::new(
        (0..400)
            .map(|i| {
                let t = i as f64 / 400.0;
                ImuMeasurement {
                    stamp_ns: i * 2_500_000,
                    gyro: wa.component_mul(&wf.map(|f| (f * t).sin())),
                    accel: a0 + aa.component_mul(&af.map(|f| (f * t).cos())),
                }
            })
            .collect(),
    )
    .unwrap()
}

fn random_state(rng: &mut ChaCha8Rng) -> SensorState {
    SensorState {
        p_ws: rand_vec3(rng, 1.0),
        q_ws: rand_quat(rng),
        v_ws: rand_vec3(rng, 1.0),
        b_g: rand_vec3(rng, 0.01),
        b_a: rand_vec3(rng, 0.1),
    }
}

pub fn imu_factor_state_jacobians(trials: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noise = ImuNoiseParams::default();
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let buf = random_stream(&mut rng);
        let s0 = random_state(&mut rng);
        // perturb the second state away from the predicted one
        let s1 = random_state(&mut rng);
        let lin = ImuBias {
            gyro: s0.b_g + rand_vec3(&mut rng, 5e-4),
            accel: s0.b_a + rand_vec3(&mut rng, 5e-4),
        };
        let t_d = rng.gen_range(-0.01..0.01);
        let pre = preintegrate(&buf, &lin, &noise, 200_000_000, 266_666_667, t_d).unwrap();
        let f = ImuFactor::new(BlockId(0), BlockId(1), BlockId(2), pre);
        let params = vec![s0.to_params().to_vec(), s1.to_params().to_vec(), vec![t_d]];
        let kinds = [BlockKind::SensorState, BlockKind::SensorState, BlockKind::Euclidean(1)];
        let slices: Vec<&[f64]> = params.iter().map(Vec::as_slice).collect();
        let ev = f.evaluate(&slices, &[true, true, false]).unwrap();
        for k in 0..2 {
            let a = ev.jacobians[k].as_ref().unwrap();
            let n = numeric_jacobian(&f, &params, &kinds, k, STEP);
            worst = worst.max(rel_err(a, &n, 1.0));
        }
    }
    worst
}

pub fn imu_factor_time_delay_column(trials: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise = ImuNoiseParams::default();
    let h = 0.5 * noise.period();
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let buf = random_stream(&mut rng);
        let s0 = random_state(&mut rng);
        let s1 = random_state(&mut rng);
        let t_d = rng.gen_range(-0.01..0.01);
        let bias = s0.bias();
        let pre = preintegrate(&buf, &bias, &noise, 300_000_000, 366_666_667, t_d).unwrap();
        let f = ImuFactor::new(BlockId(0), BlockId(1), BlockId(2), pre.clone());
        let params = [s0.to_params().to_vec(), s1.to_params().to_vec(), vec![t_d]];
        let slices: Vec<&[f64]> = params.iter().map(Vec::as_slice).collect();
        let col = f.evaluate(&slices, &[false, false, true]).unwrap().jacobians[2].clone().unwrap();
        // five-point stencil on re-integrated residuals
        let r = |td: f64| {
            let p = preintegrate(&buf, &bias, &noise, 300_000_000, 366_666_667, td).unwrap();
            f.sqrt_information() * ImuFactor::raw_residual(&p, &s0, &s1)
        };
        let stencil = (r(t_d - 2.0 * h) - 8.0 * r(t_d - h) + 8.0 * r(t_d + h) - r(t_d + 2.0 * h)) / (12.0 * h);
        let stencil = DMatrix::from_column_slice(15, 1, stencil.as_slice());
        worst = worst.max(rel_err(&col, &stencil, 1e-3));
    }
    worst
}
