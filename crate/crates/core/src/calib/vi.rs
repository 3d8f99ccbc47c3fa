//! Camera-IMU extrinsics and time delay with the cameras held fixed.

use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use super::camera::{estimate_view_pose, theta_summary};
use super::{CalibError, CalibResult, Covariance, ThetaBlock};
use crate::camera::CameraIntrinsics;
use crate::config::{PriorConfig, SessionConfig};
use crate::factors::{GaussianPrior, ImuFactor, ViReprojection};
use crate::geometry::{Frame, Pose};
use crate::guidance::{initialize_fiducial_pose, InitError, Stage};
use crate::imu::{preintegrate, ImuBuffer, ImuMeasurement, ImuNoiseParams, Preintegrated, SensorState};
use crate::sim::CameraFrame;
use crate::solver::{solve, BlockId, BlockKind, FactorId, Problem, SolveReport, SolverError, SolverOptions};
use crate::target::{CornerObservation, TargetSpec};

/// Tangent directions of `T_WF` left free: roll and pitch. Translation and
/// yaw fix the world gauge.
const FIDUCIAL_MASK: [bool; 6] = [false, false, false, true, true, false];

/// Factor graph of the camera-IMU stage.
#[derive(Debug, Clone)]
pub struct ViGraph {
    pub problem: Problem,
    pub pose_wf: BlockId,
    pub sensor_camera: BlockId,
    pub time_delay: BlockId,
    /// State blocks with their camera stamps, oldest first.
    pub states: VecDeque<(BlockId, i64)>,
    cameras: Vec<CameraIntrinsics>,
    extrinsics: Vec<Pose>,
    target: TargetSpec,
    sigma: f64,
    loss: f64,
}

impl ViGraph {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        target: &TargetSpec,
        cameras: &[CameraIntrinsics],
        extrinsics: &[Pose],
        t_wf: &Pose,
        t_sc: &Pose,
        t_d: f64,
        sigma: f64,
        loss: f64,
    ) -> Self {
        let mut problem = Problem::new();
        let pose_wf = problem.add_block(BlockKind::Pose, t_wf.to_params().to_vec(), 1);
        let sensor_camera = problem.add_block(BlockKind::Pose, t_sc.to_params().to_vec(), 1);
        let time_delay = problem.add_block(BlockKind::Euclidean(1), vec![t_d], 1);
        problem.set_mask(pose_wf, FIDUCIAL_MASK.to_vec()).expect("fresh block");
        problem.set_fixed(time_delay, true).expect("fresh block");
        Self {
            problem,
            pose_wf,
            sensor_camera,
            time_delay,
            states: VecDeque::new(),
            cameras: cameras.to_vec(),
            extrinsics: extrinsics.to_vec(),
            target: *target,
            sigma,
            loss,
        }
    }

    pub fn set_time_delay_free(&mut self, free: bool) {
        self.problem.set_fixed(self.time_delay, !free).expect("graph block");
    }

    /// Calibration parameters: `T_SC0`, plus `t_d` when it is estimated.
    pub fn theta(&self) -> Vec<BlockId> {
        let mut theta = vec![self.sensor_camera];
        if !self.problem.block(self.time_delay).expect("graph block").is_fixed() {
            theta.push(self.time_delay);
        }
        theta
    }

    pub fn cameras(&self) -> &[CameraIntrinsics] {
        &self.cameras
    }

    pub fn camera_extrinsics(&self) -> &[Pose] {
        &self.extrinsics
    }

    pub fn target(&self) -> &TargetSpec {
        &self.target
    }

    /// Adds the reprojection factors of `obs` seen from `state` to `problem`.
    pub fn add_reprojections_to(
        &self,
        problem: &mut Problem,
        state: BlockId,
        obs: &[CornerObservation],
    ) -> Result<(), SolverError> {
        for o in obs {
            let Ok(corner) = self.target.corner_position(o.corner) else {
                continue;
            };
            problem.add_factor(Arc::new(ViReprojection::new(
                state,
                self.pose_wf,
                self.sensor_camera,
                &self.extrinsics[o.camera],
                self.cameras[o.camera],
                corner,
                o.pixel,
                self.sigma,
                Some(self.loss),
            )))?;
        }
        Ok(())
    }

    pub fn add_state(&mut self, stamp_ns: i64, s: &SensorState, obs: &[CornerObservation]) -> Result<BlockId, SolverError> {
        let id = self.problem.add_block(BlockKind::SensorState, s.to_params().to_vec(), 0);
        let mut problem = std::mem::take(&mut self.problem);
        let added = self.add_reprojections_to(&mut problem, id, obs);
        self.problem = problem;
        added?;
        self.states.push_back((id, stamp_ns));
        Ok(id)
    }

    pub fn add_imu(&mut self, from: BlockId, to: BlockId, pre: Preintegrated) -> Result<FactorId, SolverError> {
        self.problem
            .add_factor(Arc::new(ImuFactor::new(from, to, self.time_delay, pre)))
    }

    /// Weak priors on `T_SC0` and on the velocity and biases of `state`.
    pub fn add_priors(&mut self, state: BlockId, p: &PriorConfig) -> Result<(), SolverError> {
        let (tr, rot) = (p.extrinsic_translation, p.extrinsic_rotation);
        let mean = self.problem.values(self.sensor_camera)?.to_vec();
        let extr = GaussianPrior::isotropic(self.sensor_camera, BlockKind::Pose, mean, &[tr, tr, tr, rot, rot, rot]);
        self.problem.add_factor(Arc::new(extr))?;
        // position and attitude come from the camera; leave them unconstrained
        let loose = 1e3;
        let mut sigmas = vec![loose; 6];
        sigmas.extend([p.velocity; 3]);
        sigmas.extend([p.gyro_bias; 3]);
        sigmas.extend([p.accel_bias; 3]);
        let mean = self.problem.values(state)?.to_vec();
        let prior = GaussianPrior::isotropic(state, BlockKind::SensorState, mean, &sigmas);
        self.problem.add_factor(Arc::new(prior))?;
        Ok(())
    }

    pub fn state(&self, id: BlockId) -> Result<SensorState, SolverError> {
        Ok(SensorState::from_params(self.problem.values(id)?))
    }

    /// `T_WF`.
    pub fn fiducial_pose(&self) -> Pose {
        Pose::from_params(Frame::World, Frame::Fiducial, self.problem.values(self.pose_wf).expect("graph block"))
    }

    /// `T_SC0`.
    pub fn sensor_camera_pose(&self) -> Pose {
        Pose::from_params(
            Frame::Sensor,
            Frame::Camera(0),
            self.problem.values(self.sensor_camera).expect("graph block"),
        )
    }

    pub fn time_delay_value(&self) -> f64 {
        self.problem.values(self.time_delay).expect("graph block")[0]
    }
}

/// Initial world frame and per-frame states.
#[derive(Debug, Clone)]
pub struct ViInit {
    /// `T_WF`.
    pub t_wf: Pose,
    /// Index into the input frames and the initial state of that frame.
    pub states: Vec<(usize, SensorState)>,
}

/// Gravity alignment on the leading static frames, then PnP for every frame.
///
/// The first `cfg.init_frames` frames must be static. `T_SC0` is taken as
/// the identity; velocities come from central differences of the positions
/// and biases start at zero.
pub fn initialize_vi(
    target: &TargetSpec,
    cameras: &[CameraIntrinsics],
    extrinsics: &[Pose],
    frames: &[CameraFrame],
    imu: &[ImuMeasurement],
    cfg: &SessionConfig,
) -> Result<ViInit, CalibError> {
    let n = cfg.init_frames;
    if frames.len() < n.max(2) {
        return Err(CalibError::NotEnoughData(format!("{} frames, need at least {}", frames.len(), n.max(2))));
    }
    let (t0, t1) = (frames[0].stamp_ns, frames[n - 1].stamp_ns);
    let window: Vec<ImuMeasurement> = imu
        .iter()
        .filter(|m| m.stamp_ns >= t0 && m.stamp_ns <= t1)
        .copied()
        .collect();
    if window.len() < 2 {
        return Err(InitError::NoImu.into());
    }
    let static_obs: Vec<Vec<CornerObservation>> = frames[..n].iter().map(|f| f.camera(0).copied().collect()).collect();
    let t_sc = Pose::identity(Frame::Sensor, Frame::Camera(0));
    let (t_wf, _) = initialize_fiducial_pose(
        target,
        &cameras[0],
        &static_obs,
        &window,
        &t_sc,
        cfg.static_accel_std,
        cfg.seed,
    )?;
    let poses: Vec<(usize, Pose)> = frames
        .par_iter()
        .enumerate()
        .filter_map(|(k, f)| {
            let t_fc = estimate_view_pose(
                target,
                cameras,
                extrinsics,
                f,
                cfg.min_corners,
                cfg.ransac_threshold,
                cfg.seed ^ f.index as u64,
            )?;
            let t_ws = t_wf.compose(&t_fc).and_then(|t| t.compose(&t_sc.inverse())).ok()?;
            Some((k, t_ws))
        })
        .collect();
    if poses.len() < 2 {
        return Err(CalibError::NotEnoughData("fewer than two frames could be localized".into()));
    }
    let time = |k: usize| frames[k].stamp_ns as f64 * 1e-9;
    let states = (0..poses.len())
        .map(|i| {
            let (a, b) = (i.saturating_sub(1), (i + 1).min(poses.len() - 1));
            let (ka, kb) = (poses[a].0, poses[b].0);
            let v = (poses[b].1.translation() - poses[a].1.translation()) / (time(kb) - time(ka));
            let (k, t_ws) = &poses[i];
            let state = SensorState {
                p_ws: *t_ws.translation(),
                q_ws: *t_ws.rotation(),
                v_ws: v,
                b_g: Vector3::zeros(),
                b_a: Vector3::zeros(),
            };
            (*k, state)
        })
        .collect();
    Ok(ViInit { t_wf, states })
}

/// RMS angular rate about the second most excited axis [rad/s].
///
/// The lever arm along a single rotation axis cannot be observed, so the
/// batch needs rotation about two axes. White gyro noise is subtracted from
/// the scatter of the angular rates; a constant bias cancels by centering.
pub fn rotational_excitation(imu: &[ImuMeasurement], noise: &ImuNoiseParams) -> f64 {
    if imu.len() < 2 {
        return 0.0;
    }
    let n = imu.len() as f64;
    let mean = imu.iter().map(|m| m.gyro).sum::<Vector3<f64>>() / n;
    let scatter = imu
        .iter()
        .map(|m| (m.gyro - mean) * (m.gyro - mean).transpose())
        .sum::<Matrix3<f64>>()
        / n;
    let white = noise.sigma_g * noise.sigma_g * noise.rate;
    let mut eig: Vec<f64> = scatter.symmetric_eigen().eigenvalues.iter().copied().collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    (eig[1] - white).max(0.0).sqrt()
}

/// Every `cfg.vi_keyframe_stride`-th frame whose IMU coverage survives any
/// delay in `±cfg.max_time_delay`.
pub fn keyframes(frames: &[CameraFrame], imu: &[ImuMeasurement], cfg: &SessionConfig) -> Vec<CameraFrame> {
    let (Some(first), Some(last)) = (imu.first(), imu.last()) else {
        return Vec::new();
    };
    let margin = ((cfg.max_time_delay + 3.0 * cfg.imu.period()) * 1e9).ceil() as i64;
    frames
        .iter()
        .filter(|f| f.detections.len() >= cfg.min_corners)
        .filter(|f| f.stamp_ns - margin >= first.stamp_ns && f.stamp_ns + margin <= last.stamp_ns)
        .step_by(cfg.vi_keyframe_stride)
        .cloned()
        .collect()
}

/// Full-batch camera-IMU calibration with the cameras of `camera` fixed.
///
/// Solves once with `t_d = 0` held fixed, then again with `t_d` free.
pub fn calibrate_imu(
    target: &TargetSpec,
    frames: &[CameraFrame],
    imu: &[ImuMeasurement],
    camera: &CalibResult,
    cfg: &SessionConfig,
) -> Result<CalibResult, CalibError> {
    let frames = keyframes(frames, imu, cfg);
    if let (Some(a), Some(b)) = (frames.first(), frames.last()) {
        let span: Vec<ImuMeasurement> = imu
            .iter()
            .filter(|m| m.stamp_ns >= a.stamp_ns && m.stamp_ns <= b.stamp_ns)
            .copied()
            .collect();
        let rate = rotational_excitation(&span, &cfg.imu);
        if !(rate >= cfg.min_rotation_rate) {
            return Err(CalibError::InsufficientExcitation(format!(
                "rotation about a second axis reaches {rate:.3} rad/s RMS, below {} rad/s",
                cfg.min_rotation_rate
            )));
        }
    }
    let init = initialize_vi(target, &camera.cameras, &camera.extrinsics, &frames, imu, cfg)?;
    let buffer = ImuBuffer::new(imu.to_vec())?;
    let mut graph = ViGraph::new(
        target,
        &camera.cameras,
        &camera.extrinsics,
        &init.t_wf,
        &Pose::identity(Frame::Sensor, Frame::Camera(0)),
        0.0,
        cfg.pixel_sigma,
        cfg.cauchy_scale,
    );
    let mut prev: Option<(BlockId, i64, SensorState)> = None;
    for (k, s) in &init.states {
        let stamp = frames[*k].stamp_ns;
        let id = graph.add_state(stamp, s, &frames[*k].detections)?;
        if let Some((pid, pstamp, ps)) = prev {
            let pre = preintegrate(&buffer, &ps.bias(), &cfg.imu, pstamp, stamp, 0.0)?;
            graph.add_imu(pid, id, pre)?;
        }
        prev = Some((id, stamp, *s));
    }
    let opts = SolverOptions {
        check_rank: false,
        ..cfg.solver
    };
    let first = solve(&mut graph.problem, &opts)?;
    graph.set_time_delay_free(true);
    let second = solve(&mut graph.problem, &opts)?;
    let report = SolveReport {
        iterations: first.iterations + second.iterations,
        initial_cost: first.initial_cost,
        ..second
    };
    let theta = graph.theta();
    let (cov, entropy) = theta_summary(&graph.problem, &theta, cfg.max_condition)?;
    Ok(CalibResult {
        stage: Stage::CameraImu,
        cameras: camera.cameras.clone(),
        camera_covariances: camera.camera_covariances.clone(),
        extrinsics: camera.extrinsics.clone(),
        sensor_camera: Some(graph.sensor_camera_pose()),
        time_delay: Some(graph.time_delay_value()),
        theta: vec![
            ThetaBlock {
                name: "sensor_camera".into(),
                dim: 6,
            },
            ThetaBlock {
                name: "time_delay".into(),
                dim: 1,
            },
        ],
        covariance: Covariance::from_matrix(&cov),
        entropy,
        rmse_px: report.rmse_px.unwrap_or(f64::NAN),
        frames: init.states.len(),
        report,
    })
}
