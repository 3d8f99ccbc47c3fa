//! Target pose from corners (homography RANSAC + refinement) and
//! gravity-aligned initialization of the fiducial pose in the world frame.

use std::sync::Arc;

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::camera::{CameraError, CameraIntrinsics, ProjectionModel};
use crate::factors::CameraReprojection;
use crate::geometry::{rot_x, rot_y, Frame, Pose, Quat};
use crate::imu::ImuMeasurement;
use crate::solver::{solve, BlockKind, Problem, SolverError, SolverOptions};
use crate::target::{CornerObservation, TargetSpec};

const RANSAC_ITERATIONS: usize = 200;
const MIN_INLIERS: usize = 6;

#[derive(Debug, Error)]
pub enum InitError {
    #[error("sensor is not static: accelerometer std {std:.3} m/s² exceeds {limit} m/s²")]
    NotStatic { std: f64, limit: f64 },
    #[error("RANSAC found only {inliers} inliers (need {MIN_INLIERS})")]
    RansacFailed { inliers: usize },
    #[error("no IMU samples in the initialization window")]
    NoImu,
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Normalized DLT homography mapping `src` to `dst` (both inhomogeneous 2D).
pub fn estimate_homography(src: &[Vector2<f64>], dst: &[Vector2<f64>]) -> Option<Matrix3<f64>> {
    if src.len() < 4 || src.len() != dst.len() {
        return None;
    }
    let normalizer = |pts: &[Vector2<f64>]| {
        let n = pts.len() as f64;
        let mean = pts.iter().sum::<Vector2<f64>>() / n;
        let spread = pts.iter().map(|p| (p - mean).norm()).sum::<f64>() / n;
        let s = if spread > 0.0 { std::f64::consts::SQRT_2 / spread } else { 1.0 };
        Matrix3::new(s, 0.0, -s * mean.x, 0.0, s, -s * mean.y, 0.0, 0.0, 1.0)
    };
    let (ns, nd) = (normalizer(src), normalizer(dst));
    let mut a = DMatrix::zeros(2 * src.len(), 9);
    for (i, (p, q)) in src.iter().zip(dst).enumerate() {
        let p = ns * p.push(1.0);
        let q = nd * q.push(1.0);
        let (x, y, u, v) = (p.x / p.z, p.y / p.z, q.x / q.z, q.y / q.z);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for c in 0..9 {
            a[(2 * i, c)] = r0[c];
            a[(2 * i + 1, c)] = r1[c];
        }
    }
    // null vector of A from the smallest eigenvector of AᵀA
    let eig = (a.transpose() * &a).symmetric_eigen();
    let k = eig.eigenvalues.imin();
    let h = eig.eigenvectors.column(k);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let h = nd.try_inverse()? * hn * ns;
    (h[(2, 2)].abs() > 1e-300).then(|| h / h[(2, 2)])
}

/// Camera-from-target pose `T_CF` from a plane-to-normalized-image homography.
pub fn pose_from_homography(h: &Matrix3<f64>) -> Option<Pose> {
    let (h1, h2, h3) = (h.column(0), h.column(1), h.column(2));
    let scale = 2.0 / (h1.norm() + h2.norm());
    // the target must lie in front of the camera
    let sign = if h3.z >= 0.0 { 1.0 } else { -1.0 };
    let r1 = h1 * scale * sign;
    let r2 = h2 * scale * sign;
    let t = h3 * scale * sign;
    let approx = Matrix3::from_columns(&[r1, r2, r1.cross(&r2)]);
    let svd = approx.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        r = -r;
    }
    Some(Pose::from_matrix(Frame::Camera(0), Frame::Fiducial, &r, t))
}

fn normalized(cam: &CameraIntrinsics, px: &Vector2<f64>) -> Result<Vector2<f64>, CameraError> {
    let ray = cam.backproject(px)?;
    Ok(Vector2::new(ray.x / ray.z, ray.y / ray.z))
}

fn reprojection_error(cam: &CameraIntrinsics, t_cf: &Pose, corner: &Vector3<f64>, px: &Vector2<f64>) -> f64 {
    match cam.project(&t_cf.transform_point(corner)) {
        Ok(p) => (p.pixel - px).norm(),
        Err(_) => f64::INFINITY,
    }
}

/// Reference-camera pose `T_FC` from corner observations of a single camera.
///
/// Four-point homography RANSAC followed by Gauss-Newton refinement of the
/// reprojection error over the inliers.
pub fn solve_pnp(
    target: &TargetSpec,
    cam: &CameraIntrinsics,
    obs: &[CornerObservation],
    inlier_px: f64,
    seed: u64,
) -> Result<Pose, InitError> {
    let corners: Vec<Vector3<f64>> = obs
        .iter()
        .map(|o| target.corner_position(o.corner).map_err(|_| InitError::RansacFailed { inliers: 0 }))
        .collect::<Result<_, _>>()?;
    let plane: Vec<Vector2<f64>> = corners.iter().map(|c| c.xy()).collect();
    let image: Vec<Vector2<f64>> = obs
        .iter()
        .map(|o| normalized(cam, &o.pixel))
        .collect::<Result<_, _>>()?;
    if obs.len() < MIN_INLIERS {
        return Err(InitError::RansacFailed { inliers: obs.len() });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Vec<usize> = Vec::new();
    for _ in 0..RANSAC_ITERATIONS {
        let pick = sample(&mut rng, obs.len(), 4).into_vec();
        let src: Vec<_> = pick.iter().map(|&i| plane[i]).collect();
        let dst: Vec<_> = pick.iter().map(|&i| image[i]).collect();
        let Some(t_cf) = estimate_homography(&src, &dst).and_then(|h| pose_from_homography(&h)) else {
            continue;
        };
        let inliers: Vec<usize> = (0..obs.len())
            .filter(|&i| reprojection_error(cam, &t_cf, &corners[i], &obs[i].pixel) < inlier_px)
            .collect();
        if inliers.len() > best.len() {
            best = inliers;
            if best.len() == obs.len() {
                break;
            }
        }
    }
    if best.len() < MIN_INLIERS {
        return Err(InitError::RansacFailed { inliers: best.len() });
    }
    let src: Vec<_> = best.iter().map(|&i| plane[i]).collect();
    let dst: Vec<_> = best.iter().map(|&i| image[i]).collect();
    let t_cf = estimate_homography(&src, &dst)
        .and_then(|h| pose_from_homography(&h))
        .ok_or(InitError::RansacFailed { inliers: best.len() })?;

    let mut problem = Problem::new();
    let pose = problem.add_block(BlockKind::Pose, t_cf.inverse().to_params().to_vec(), 0);
    let intr = problem.add_block(BlockKind::Euclidean(8), cam.params().to_vec(), 1);
    problem.set_fixed(intr, true)?;
    for &i in &best {
        problem.add_factor(Arc::new(CameraReprojection::new(
            pose,
            None,
            intr,
            *cam,
            corners[i],
            obs[i].pixel,
            1.0,
            None,
        )))?;
    }
    solve(
        &mut problem,
        &SolverOptions {
            max_iterations: 20,
            ..Default::default()
        },
    )?;
    Ok(Pose::from_params(Frame::Fiducial, Frame::Camera(0), problem.values(pose)?))
}

/// Focal length from one homography in pixels, assuming square pixels and
/// the principal point at `center`. `None` for near-frontal views.
pub fn focal_from_homography(h_px: &Matrix3<f64>, center: &Vector2<f64>) -> Option<f64> {
    let shift = Matrix3::new(1.0, 0.0, -center.x, 0.0, 1.0, -center.y, 0.0, 0.0, 1.0);
    let h = shift * h_px;
    let (h11, h12, h21, h22, h31, h32) = (h[(0, 0)], h[(0, 1)], h[(1, 0)], h[(1, 1)], h[(2, 0)], h[(2, 1)]);
    // orthogonality and equal-norm constraints on the first two rotation columns
    let cands = [
        (-(h11 * h12 + h21 * h22), h31 * h32),
        (-(h11 * h11 + h21 * h21 - h12 * h12 - h22 * h22), h31 * h31 - h32 * h32),
    ];
    let (num, den) = cands
        .into_iter()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))?;
    let scale = h.column(0).norm().max(h.column(1).norm());
    if den.abs() < 1e-9 * scale * scale {
        return None;
    }
    let f2 = num / den;
    (f2 > 0.0).then(|| f2.sqrt())
}

/// Camera rotation `R_WC` with zero yaw whose z-axis of `W` opposes gravity,
/// from the mean specific force `f_c` measured in the camera frame.
pub fn gravity_aligned_rotation(f_c: &Vector3<f64>) -> Matrix3<f64> {
    let u = f_c.normalize();
    let roll = u.y.atan2(u.z);
    let pitch = (-u.x).atan2((u.y * u.y + u.z * u.z).sqrt());
    rot_y(pitch) * rot_x(roll)
}

/// Block length over which accelerometer samples are averaged before the
/// stillness test [s]. White noise at typical densities would otherwise
/// dominate the spread of raw samples.
pub const STATIC_BLOCK: f64 = 0.2;

/// Largest per-axis standard deviation of [`STATIC_BLOCK`] accelerometer
/// means; the raw-sample spread when the window holds fewer than two blocks.
pub fn motion_accel_std(imu: &[ImuMeasurement]) -> f64 {
    let spread = |v: &[Vector3<f64>]| {
        let n = v.len() as f64;
        let mean = v.iter().sum::<Vector3<f64>>() / n;
        let var = v.iter().map(|a| (a - mean).map(|x| x * x)).sum::<Vector3<f64>>() / n;
        var.map(f64::sqrt).max()
    };
    if imu.len() < 2 {
        return 0.0;
    }
    let span = (imu[imu.len() - 1].stamp_ns - imu[0].stamp_ns) as f64 * 1e-9;
    let dt = span / (imu.len() - 1) as f64;
    let block = ((STATIC_BLOCK / dt).round() as usize).max(1);
    let means: Vec<Vector3<f64>> = imu
        .chunks_exact(block)
        .map(|c| c.iter().map(|m| m.accel).sum::<Vector3<f64>>() / c.len() as f64)
        .collect();
    if means.len() >= 2 {
        spread(&means)
    } else {
        spread(&imu.iter().map(|m| m.accel).collect::<Vec<_>>())
    }
}

/// Initial `(T_WF, T_WC)` from a static window.
///
/// `frames` holds reference-camera detections of the static window; `t_sc`
/// is the current sensor-camera guess used to express gravity in the camera
/// frame. The camera sits at the world origin with zero yaw. Stillness is
/// judged by [`motion_accel_std`].
pub fn initialize_fiducial_pose(
    target: &TargetSpec,
    cam: &CameraIntrinsics,
    frames: &[Vec<CornerObservation>],
    imu: &[ImuMeasurement],
    t_sc: &Pose,
    static_std: f64,
    seed: u64,
) -> Result<(Pose, Pose), InitError> {
    if imu.is_empty() {
        return Err(InitError::NoImu);
    }
    let mean = imu.iter().map(|m| m.accel).sum::<Vector3<f64>>() / imu.len() as f64;
    let std = motion_accel_std(imu);
    if !(std <= static_std) {
        return Err(InitError::NotStatic { std, limit: static_std });
    }
    let f_c = t_sc.rotation().inverse().rotate(&mean);
    let t_wc = Pose::new(
        Frame::World,
        Frame::Camera(0),
        Quat::from_matrix(&gravity_aligned_rotation(&f_c)),
        Vector3::zeros(),
    );
    let obs: Vec<CornerObservation> = frames.iter().flatten().filter(|o| o.camera == 0).copied().collect();
    let t_fc = solve_pnp(target, cam, &obs, 5.0, seed)?;
    let t_wf = t_wc.compose(&t_fc.inverse()).expect("frames chain");
    Ok((t_wf, t_wc))
}
