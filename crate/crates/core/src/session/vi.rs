//! Online camera-IMU stage and the trajectory evaluator.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::camera::info_err;
use crate::calib::{estimate_view_pose, initialize_vi, CalibError, CalibResult, ViGraph};
use crate::config::SessionConfig;
use crate::factors::{GaussianPrior, ImuFactor};
use crate::geometry::{Frame, Pose};
use crate::guidance::{build_nbt_set, InitError, NbtName, NbtSpec};
use crate::imu::{preintegrate, ImuBias, ImuBuffer, ImuMeasurement, SensorState};
use crate::info::{marginal_entropy, score_against};
use crate::sim::{ideal_imu, CameraFrame, Motion};
use crate::solver::{marginal_information, marginalize, solve, BlockId, BlockKind, Problem, SolverError};
use crate::target::{simulate_detections, CornerObservation, ImageTag};

/// IMU samples kept on either side of a preintegration interval. Processing
/// waits until the stream reaches this far past a frame, so live runs and
/// replays integrate identical samples.
pub(crate) fn imu_margin_ns(cfg: &SessionConfig) -> i64 {
    (3.0 * cfg.imu.period() * 1e9).ceil() as i64
}

fn imu_slice(imu: &[ImuMeasurement], from_ns: i64, to_ns: i64) -> &[ImuMeasurement] {
    let a = imu.partition_point(|m| m.stamp_ns < from_ns);
    let b = imu.partition_point(|m| m.stamp_ns <= to_ns);
    &imu[a..b.max(a)]
}

/// Preintegrates `[from, to]` with `t_d = 0` on a private copy of the samples.
fn preintegrate_between(
    imu: &[ImuMeasurement],
    bias: &ImuBias,
    cfg: &SessionConfig,
    from_ns: i64,
    to_ns: i64,
) -> Result<crate::imu::Preintegrated, CalibError> {
    let m = imu_margin_ns(cfg);
    let buffer = ImuBuffer::new(imu_slice(imu, from_ns - m, to_ns + m).to_vec())?;
    Ok(preintegrate(&buffer, bias, &cfg.imu, from_ns, to_ns, 0.0)?)
}

/// Everything the trajectory evaluator needs, detached from the live graph.
#[derive(Debug, Clone)]
pub struct EvalRequest {
    pub id: u64,
    /// Camera stamp of the newest keyframe in the snapshot [ns].
    pub stamp_ns: i64,
    pub graph: ViGraph,
    pub bias: ImuBias,
    /// Keyframe spacing used for the hypothetical states [s].
    pub keyframe_dt: f64,
    pub cfg: SessionConfig,
}

/// MI of every trajectory, in [`NbtName::ALL`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub id: u64,
    pub scores: Vec<(NbtName, f64)>,
}

impl EvalResult {
    /// Highest score, ties going to the earlier trajectory.
    pub fn best(&self) -> Option<(NbtName, f64)> {
        self.scores
            .iter()
            .copied()
            .fold(None, |best, s| match best {
                Some((_, m)) if m >= s.1 => best,
                _ => Some(s),
            })
    }
}

/// Noiseless measurements of one trajectory flown with the current estimate.
struct Hypothesis {
    states: Vec<(i64, SensorState, Vec<CornerObservation>)>,
    imu: Vec<ImuMeasurement>,
}

fn hypothesize(req: &EvalRequest, spec: &NbtSpec) -> Hypothesis {
    let g = &req.graph;
    let t_wf = g.fiducial_pose();
    let t_sc = g.sensor_camera_pose();
    let motion = Motion::Nbt { spec: *spec, t_wf };
    let cfg = &req.cfg;
    let period_ns = (cfg.imu.period() * 1e9).round() as i64;
    let margin = 4 * period_ns + imu_margin_ns(cfg);
    let end_ns = (spec.t_nbt * 1e9).round() as i64;
    let imu = (-margin / period_ns..=(end_ns + margin) / period_ns + 1)
        .map(|k| {
            let stamp = k * period_ns;
            ideal_imu(&motion.at(stamp as f64 * 1e-9), &req.bias, &cfg.imu.gravity, stamp)
        })
        .collect();
    let dt_ns = (req.keyframe_dt * 1e9).round().max(1.0) as i64;
    let states = (0..=end_ns / dt_ns)
        .map(|k| {
            let stamp = k * dt_ns;
            let kin = motion.at(stamp as f64 * 1e-9);
            let state = SensorState {
                p_ws: *kin.pose.translation(),
                q_ws: *kin.pose.rotation(),
                v_ws: kin.velocity,
                b_g: req.bias.gyro,
                b_a: req.bias.accel,
            };
            let mut obs = Vec::new();
            for (i, (cam, t_c0ci)) in g.cameras().iter().zip(g.camera_extrinsics()).enumerate() {
                let t_wc = kin.pose.compose(&t_sc).and_then(|t| t.compose(t_c0ci)).expect("frames chain");
                let t_cf = t_wc.inverse().compose(&t_wf).expect("frames chain");
                let tag = ImageTag {
                    camera: i,
                    frame: k as usize,
                    stamp_ns: stamp,
                };
                obs.extend(simulate_detections(g.target(), cam, &t_cf, 0.0, 0, tag));
            }
            (stamp, state, obs)
        })
        .collect();
    Hypothesis { states, imu }
}

fn augment(req: &EvalRequest, h: &Hypothesis, p: &mut Problem) -> Result<(), SolverError> {
    let g = &req.graph;
    let p_cfg = &req.cfg.priors;
    let mut prev: Option<(BlockId, i64)> = None;
    for (stamp, state, obs) in &h.states {
        let id = p.add_block(BlockKind::SensorState, state.to_params().to_vec(), 0);
        g.add_reprojections_to(p, id, obs)?;
        match prev {
            None => {
                // the chain starts unconnected; pin only what a new start leaves open
                let mut sigmas = vec![1e3; 6];
                sigmas.extend([p_cfg.velocity; 3]);
                sigmas.extend([p_cfg.gyro_bias; 3]);
                sigmas.extend([p_cfg.accel_bias; 3]);
                let prior = GaussianPrior::isotropic(id, BlockKind::SensorState, state.to_params().to_vec(), &sigmas);
                p.add_factor(Arc::new(prior))?;
            }
            Some((pid, pstamp)) => {
                let pre = preintegrate_between(&h.imu, &req.bias, &req.cfg, pstamp, *stamp)
                    .map_err(|e| SolverError::InvalidBlock {
                        block: id,
                        reason: e.to_string(),
                    })?;
                p.add_factor(Arc::new(ImuFactor::new(pid, id, g.time_delay, pre)))?;
            }
        }
        prev = Some((id, *stamp));
    }
    Ok(())
}

/// Scores the six trajectories against the snapshot in `req`.
pub fn evaluate_nbts(req: &EvalRequest) -> Result<EvalResult, CalibError> {
    let g = &req.graph;
    let theta = g.theta();
    let before = marginal_information(&g.problem, &theta)?;
    let specs = build_nbt_set(g.target(), &req.cfg.nbt);
    let scores = NbtName::ALL
        .par_iter()
        .map(|name| {
            let spec = specs.iter().find(|s| s.name == *name).expect("all trajectories are built");
            let h = hypothesize(req, spec);
            let s = score_against(&before, &g.problem, &theta, 0, |p| augment(req, &h, p)).map_err(info_err)?;
            Ok((*name, s.mutual_info))
        })
        .collect::<Result<Vec<_>, CalibError>>()?;
    Ok(EvalResult { id: req.id, scores })
}

#[derive(Debug)]
pub(crate) struct ViStage {
    pub camera: CalibResult,
    candidates: Vec<CameraFrame>,
    graph: Option<ViGraph>,
    last: Option<(BlockId, i64, SensorState)>,
    seen: usize,
    pub keyframes: usize,
    pub rmse_px: Option<f64>,
    pub last_pose: Option<Pose>,
    keyframe_dt: f64,
}

impl ViStage {
    pub fn new(camera: CalibResult, cfg: &SessionConfig, camera_rate: f64) -> Self {
        Self {
            camera,
            candidates: Vec::new(),
            graph: None,
            last: None,
            seen: 0,
            keyframes: 0,
            rmse_px: None,
            last_pose: None,
            keyframe_dt: cfg.vi_keyframe_stride as f64 / camera_rate,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.graph.is_some()
    }

    /// Stamp of the oldest frame in the initialization window.
    pub fn first_candidate_ns(&self) -> Option<i64> {
        self.candidates.first().map(|f| f.stamp_ns)
    }

    fn localize(&self, frame: &CameraFrame, cfg: &SessionConfig) -> Option<Pose> {
        estimate_view_pose(
            &cfg.target,
            &self.camera.cameras,
            &self.camera.extrinsics,
            frame,
            cfg.min_corners,
            cfg.ransac_threshold,
            cfg.seed ^ frame.index as u64,
        )
    }

    /// Handles one frame whose IMU coverage is complete. Returns the
    /// camera pose when the frame became a keyframe.
    pub fn process(
        &mut self,
        frame: &CameraFrame,
        imu: &[ImuMeasurement],
        cfg: &SessionConfig,
    ) -> Result<Option<Pose>, CalibError> {
        if frame.detections.len() < cfg.min_corners {
            return Ok(None);
        }
        self.seen += 1;
        if !(self.seen - 1).is_multiple_of(cfg.vi_keyframe_stride) {
            return Ok(None);
        }
        let Some(t_fc) = self.localize(frame, cfg) else {
            return Ok(None);
        };
        self.last_pose = Some(t_fc);
        if self.graph.is_none() {
            self.candidates.push(frame.clone());
            if self.candidates.len() >= cfg.init_frames {
                self.try_initialize(imu, cfg)?;
            }
            return Ok(Some(t_fc));
        }
        self.add_keyframe(frame, &t_fc, imu, cfg)?;
        Ok(Some(t_fc))
    }

    fn try_initialize(&mut self, imu: &[ImuMeasurement], cfg: &SessionConfig) -> Result<(), CalibError> {
        let init = match initialize_vi(
            &cfg.target,
            &self.camera.cameras,
            &self.camera.extrinsics,
            &self.candidates,
            imu,
            cfg,
        ) {
            Ok(init) => init,
            Err(CalibError::Init(InitError::NotStatic { .. } | InitError::RansacFailed { .. }))
            | Err(CalibError::NotEnoughData(_)) => {
                self.candidates.remove(0);
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        let mut graph = ViGraph::new(
            &cfg.target,
            &self.camera.cameras,
            &self.camera.extrinsics,
            &init.t_wf,
            &Pose::identity(Frame::Sensor, Frame::Camera(0)),
            0.0,
            cfg.pixel_sigma,
            cfg.cauchy_scale,
        );
        let mut prev: Option<(BlockId, i64, SensorState)> = None;
        for (k, s) in &init.states {
            let f = &self.candidates[*k];
            let id = graph.add_state(f.stamp_ns, s, &f.detections)?;
            match prev {
                None => graph.add_priors(id, &cfg.priors)?,
                Some((pid, pstamp, ps)) => {
                    let pre = preintegrate_between(imu, &ps.bias(), cfg, pstamp, f.stamp_ns)?;
                    graph.add_imu(pid, id, pre)?;
                }
            }
            prev = Some((id, f.stamp_ns, *s));
        }
        self.keyframes = init.states.len();
        self.graph = Some(graph);
        self.candidates.clear();
        self.refine(cfg)
    }

    fn add_keyframe(
        &mut self,
        frame: &CameraFrame,
        t_fc: &Pose,
        imu: &[ImuMeasurement],
        cfg: &SessionConfig,
    ) -> Result<(), CalibError> {
        let graph = self.graph.as_mut().expect("initialized");
        let (pid, pstamp, ps) = self.last.expect("initialized graph has a state");
        let pre = preintegrate_between(imu, &ps.bias(), cfg, pstamp, frame.stamp_ns)?;
        let predicted = pre.predict(&ps);
        let t_ws = graph
            .fiducial_pose()
            .compose(t_fc)
            .and_then(|t| t.compose(&graph.sensor_camera_pose().inverse()))
            .expect("frames chain");
        let state = SensorState {
            p_ws: *t_ws.translation(),
            q_ws: *t_ws.rotation(),
            ..predicted
        };
        let id = graph.add_state(frame.stamp_ns, &state, &frame.detections)?;
        graph.add_imu(pid, id, pre)?;
        self.keyframes += 1;
        self.refine(cfg)
    }

    fn refine(&mut self, cfg: &SessionConfig) -> Result<(), CalibError> {
        let graph = self.graph.as_mut().expect("initialized");
        let report = solve(&mut graph.problem, &super::camera::online_solver(cfg))?;
        self.rmse_px = report.rmse_px;
        while graph.states.len() > cfg.vi_window {
            let (oldest, _) = graph.states.pop_front().expect("window is non-empty");
            marginalize(&mut graph.problem, &[oldest])?;
        }
        let &(id, stamp) = graph.states.back().expect("window is non-empty");
        self.last = Some((id, stamp, graph.state(id)?));
        Ok(())
    }

    pub fn entropy(&self) -> Option<f64> {
        let g = self.graph.as_ref()?;
        marginal_information(&g.problem, &g.theta()).ok().map(|i| marginal_entropy(&i))
    }

    pub fn snapshot(&self, id: u64, cfg: &SessionConfig) -> Option<EvalRequest> {
        let g = self.graph.as_ref()?;
        let (_, stamp_ns, state) = self.last?;
        let mut graph = g.clone();
        graph.problem = g.problem.detached();
        Some(EvalRequest {
            id,
            stamp_ns,
            graph,
            bias: state.bias(),
            keyframe_dt: self.keyframe_dt,
            cfg: cfg.clone(),
        })
    }
}
