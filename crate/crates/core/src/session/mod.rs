//! Guided calibration sessions.
//!
//! [`Engine`] is a deterministic state machine fed with camera frames and
//! IMU samples. It emits protocol [`Event`]s and, in the camera-IMU stage,
//! hands trajectory evaluations to the caller through
//! [`Engine::take_eval_request`] so they can run off the capture path. The
//! frame count at which each evaluation result was applied is recorded,
//! which lets a replay reproduce the session exactly.

pub mod camera;
pub mod driver;
pub mod protocol;
pub mod server;
pub mod vi;

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib::{calibrate_imu, CalibError, CalibResult};
use crate::config::SessionConfig;
use crate::geometry::Pose;
use crate::guidance::{build_nbt_set, NbtName, SessionMode, Stage};
use crate::imu::ImuMeasurement;
use crate::sim::{CameraFrame, Dataset, DatasetError};
use camera::CameraStage;
pub use camera::simulate_view;
pub use driver::{replay, run_simulated, DriverOptions, SessionOutcome};
pub use protocol::{Command, Event, NbtScore, ProtocolError, Suggestion, PROTOCOL_VERSION};
pub use vi::{evaluate_nbts, EvalRequest, EvalResult};
use vi::{imu_margin_ns, ViStage};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Calib(#[from] CalibError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("session aborted: {0}")]
    Aborted(String),
    #[error("evaluation {got} does not answer the outstanding request {expected:?}")]
    UnexpectedEvaluation { got: u64, expected: Option<u64> },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("session file {path}: {source}")]
    Record {
        path: String,
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}

impl SessionError {
    pub fn is_unobservable(&self) -> bool {
        matches!(self, Self::Calib(e) if e.is_unobservable())
    }
}

/// Which stages a session runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SessionPlan {
    CameraOnly,
    Full,
    /// Camera-IMU stage only, with the cameras taken from `camera`.
    ImuOnly { camera: Box<CalibResult> },
}

/// An evaluation result applied after `after_frames` frames were processed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalMark {
    pub request: u64,
    pub after_frames: usize,
}

/// Everything besides the raw measurements needed to replay a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionRecord {
    pub config: SessionConfig,
    pub camera_count: usize,
    pub camera_rate: f64,
    pub plan: SessionPlan,
    pub marks: Vec<EvalMark>,
}

impl SessionRecord {
    pub const FILE: &'static str = "session.json";

    pub fn write(&self, dir: &Path) -> Result<(), SessionError> {
        let path = dir.join(Self::FILE);
        let err = |e: Box<dyn std::error::Error + Send + Sync>| SessionError::Record {
            path: path.display().to_string(),
            source: e,
        };
        std::fs::create_dir_all(dir).map_err(|e| err(e.into()))?;
        let json = serde_json::to_string_pretty(self).map_err(|e| err(e.into()))?;
        std::fs::write(&path, json + "\n").map_err(|e| err(e.into()))
    }

    pub fn read(dir: &Path) -> Result<Self, SessionError> {
        let path = dir.join(Self::FILE);
        let err = |e: Box<dyn std::error::Error + Send + Sync>| SessionError::Record {
            path: path.display().to_string(),
            source: e,
        };
        let text = std::fs::read_to_string(&path).map_err(|e| err(e.into()))?;
        serde_json::from_str(&text).map_err(|e| err(e.into()))
    }
}

#[derive(Debug, Clone, Copy)]
struct NbvGoal {
    t_fc: Pose,
    since_ns: i64,
}

/// Suggestion currently shown to the operator.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveSuggestion {
    /// Increases with every new suggestion.
    pub seq: u64,
    pub suggestion: Suggestion,
    /// Stamp of the data the suggestion was computed from [ns].
    pub stamp_ns: i64,
}

#[derive(Debug)]
pub struct Engine {
    cfg: SessionConfig,
    camera_count: usize,
    camera_rate: f64,
    plan: SessionPlan,
    stage: Stage,
    mode: SessionMode,
    started: bool,
    aborted: Option<String>,
    cam: CameraStage,
    vi: Option<ViStage>,
    imu: Vec<ImuMeasurement>,
    frames: Vec<CameraFrame>,
    queue: VecDeque<CameraFrame>,
    processed: usize,
    start_ns: Option<i64>,
    last_stamp_ns: i64,
    events: Vec<Event>,
    next_request: u64,
    outstanding: Option<u64>,
    request: Option<vi::EvalRequest>,
    last_snapshot_ns: Option<i64>,
    marks: Vec<EvalMark>,
    suggestion: Option<ActiveSuggestion>,
    nbv_goal: Option<NbvGoal>,
    live_pose: Option<Pose>,
    /// Stamp of the first frame of the camera-IMU batch.
    vi_first_ns: Option<i64>,
    finish_ns: Option<i64>,
    camera_result: Option<CalibResult>,
    imu_result: Option<CalibResult>,
}

impl Engine {
    pub fn new(cfg: SessionConfig, camera_count: usize, camera_rate: f64, plan: SessionPlan) -> Result<Self, SessionError> {
        cfg.validate().map_err(|e| SessionError::Config(e.to_string()))?;
        if camera_count == 0 || !(camera_rate > 0.0) {
            return Err(SessionError::Config("need at least one camera and a positive frame rate".into()));
        }
        let (stage, vi, camera_result) = match &plan {
            SessionPlan::ImuOnly { camera } => {
                if camera.cameras.len() != camera_count {
                    return Err(SessionError::Config(format!(
                        "camera result has {} cameras, the rig has {camera_count}",
                        camera.cameras.len()
                    )));
                }
                let vi = ViStage::new((**camera).clone(), &cfg, camera_rate);
                (Stage::CameraImu, Some(vi), Some((**camera).clone()))
            }
            _ => (Stage::Camera, None, None),
        };
        Ok(Self {
            cam: CameraStage::new(&cfg, camera_count),
            cfg,
            camera_count,
            camera_rate,
            plan,
            stage,
            mode: SessionMode::Initializing,
            started: false,
            aborted: None,
            vi,
            imu: Vec::new(),
            frames: Vec::new(),
            queue: VecDeque::new(),
            processed: 0,
            start_ns: None,
            last_stamp_ns: 0,
            events: Vec::new(),
            next_request: 0,
            outstanding: None,
            request: None,
            last_snapshot_ns: None,
            marks: Vec::new(),
            suggestion: None,
            nbv_goal: None,
            live_pose: None,
            vi_first_ns: None,
            finish_ns: None,
            camera_result,
            imu_result: None,
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn mode(&self) -> SessionMode {
        self.mode
    }

    pub fn is_started(&self) -> bool {
        self.started
    }

    pub fn is_done(&self) -> bool {
        self.mode == SessionMode::Done
    }

    pub fn aborted(&self) -> Option<&str> {
        self.aborted.as_deref()
    }

    /// Whether the engine still consumes measurements.
    pub fn is_running(&self) -> bool {
        self.started && !self.is_done() && self.aborted.is_none()
    }

    pub fn suggestion(&self) -> Option<&ActiveSuggestion> {
        self.suggestion.as_ref()
    }

    pub fn camera_result(&self) -> Option<&CalibResult> {
        self.camera_result.as_ref()
    }

    pub fn imu_result(&self) -> Option<&CalibResult> {
        self.imu_result.as_ref()
    }

    /// Latest estimated `T_FC0`.
    pub fn live_pose(&self) -> Option<&Pose> {
        self.live_pose.as_ref()
    }

    pub fn frames_processed(&self) -> usize {
        self.processed
    }

    /// Latest camera stamp seen [ns].
    pub fn now_ns(&self) -> i64 {
        self.last_stamp_ns
    }

    pub fn start(&mut self) {
        if self.started {
            return;
        }
        self.started = true;
        self.emit_state();
    }

    pub fn abort(&mut self, reason: impl Into<String>) {
        if self.aborted.is_some() || self.is_done() {
            return;
        }
        let reason = reason.into();
        self.aborted = Some(reason.clone());
        self.events.push(Event::Abort { reason });
    }

    pub fn drain_events(&mut self) -> Vec<Event> {
        std::mem::take(&mut self.events)
    }

    /// Measurements are ignored until [`Engine::start`].
    pub fn push_imu(&mut self, samples: &[ImuMeasurement]) -> Result<(), SessionError> {
        if !self.is_running() {
            return Ok(());
        }
        for m in samples {
            if self.imu.last().is_some_and(|l| m.stamp_ns <= l.stamp_ns) {
                continue;
            }
            self.imu.push(*m);
        }
        self.pump()
    }

    /// Frames without detections are dropped; the rest are renumbered in
    /// arrival order so a recording reproduces them exactly.
    pub fn push_frame(&mut self, frame: &CameraFrame) -> Result<(), SessionError> {
        if !self.is_running() || frame.detections.is_empty() {
            return Ok(());
        }
        if self.frames.last().is_some_and(|l| frame.stamp_ns <= l.stamp_ns) {
            return Ok(());
        }
        let index = self.frames.len();
        let mut f = frame.clone();
        f.index = index;
        for o in &mut f.detections {
            o.frame = index;
        }
        f.detections.sort_by_key(|o| (o.camera, o.corner));
        self.start_ns.get_or_insert(f.stamp_ns);
        self.frames.push(f.clone());
        self.queue.push_back(f);
        self.pump()
    }

    /// The pending trajectory evaluation, if one was issued.
    pub fn take_eval_request(&mut self) -> Option<vi::EvalRequest> {
        self.request.take()
    }

    pub fn apply_evaluation(&mut self, result: &vi::EvalResult) -> Result<(), SessionError> {
        if self.outstanding != Some(result.id) {
            return Err(SessionError::UnexpectedEvaluation {
                got: result.id,
                expected: self.outstanding,
            });
        }
        self.outstanding = None;
        self.marks.push(EvalMark {
            request: result.id,
            after_frames: self.processed,
        });
        if self.mode != SessionMode::GuidingNbt || !self.is_running() {
            return Ok(());
        }
        let Some((name, best)) = result.best() else {
            return Ok(());
        };
        let specs = build_nbt_set(&self.cfg.target, &self.cfg.nbt);
        let spec = specs.iter().find(|s| s.name == name).expect("all trajectories are built");
        let polyline = spec
            .polyline(64)
            .expect("valid trajectory")
            .iter()
            .map(|p| [p.x, p.y, p.z])
            .collect();
        let scores = result
            .scores
            .iter()
            .map(|&(name, mutual_info)| NbtScore { name, mutual_info })
            .collect();
        self.suggest(
            Suggestion::Nbt {
                name,
                mutual_info: best,
                polyline,
                scores,
            },
            self.last_snapshot_ns.unwrap_or(self.last_stamp_ns),
        );
        if best <= self.cfg.info_threshold {
            self.finish_ns = Some(self.last_stamp_ns);
            self.set_mode(SessionMode::FinalBatch);
            self.pump()?;
        }
        Ok(())
    }

    /// Measurements and evaluation marks for a replay.
    pub fn record(&self) -> (SessionRecord, Dataset) {
        let record = SessionRecord {
            config: self.cfg.clone(),
            camera_count: self.camera_count,
            camera_rate: self.camera_rate,
            plan: self.plan.clone(),
            marks: self.marks.clone(),
        };
        let ds = Dataset::from_frames(self.camera_count, &self.frames, self.imu.clone());
        (record, ds)
    }

    fn set_mode(&mut self, next: SessionMode) {
        debug_assert!(
            self.mode == next || self.mode.can_transition(next),
            "{:?} -> {next:?}",
            self.mode
        );
        self.mode = next;
        self.emit_state();
    }

    fn emit_state(&mut self) {
        self.events.push(Event::State {
            t_ns: self.last_stamp_ns,
            stage: self.stage,
            mode: self.mode,
        });
    }

    fn suggest(&mut self, suggestion: Suggestion, stamp_ns: i64) {
        let seq = self.suggestion.as_ref().map_or(0, |s| s.seq + 1);
        self.events.push(Event::Suggestion {
            t_ns: self.last_stamp_ns,
            suggestion: suggestion.clone(),
        });
        self.suggestion = Some(ActiveSuggestion {
            seq,
            suggestion,
            stamp_ns,
        });
    }

    fn metrics(&mut self, entropy: Option<f64>, mutual_info: Option<f64>) {
        let (rmse_px, views) = match (self.stage, &self.vi) {
            (Stage::CameraImu, Some(vi)) => (vi.rmse_px, vi.keyframes),
            _ => (self.cam.rmse_px, self.cam.views()),
        };
        if let Some(entropy) = entropy {
            self.events.push(Event::Metrics {
                t_ns: self.last_stamp_ns,
                stage: self.stage,
                entropy,
                mutual_info,
                rmse_px,
                views,
            });
        }
    }

    /// Processes queued frames while their IMU coverage allows, then runs a
    /// pending camera-IMU batch. Errors end the session.
    fn pump(&mut self) -> Result<(), SessionError> {
        let res = self.pump_inner();
        if let Err(e) = &res {
            self.abort(e.to_string());
        }
        res
    }

    fn pump_inner(&mut self) -> Result<(), SessionError> {
        while self.is_running() {
            if self.mode == SessionMode::FinalBatch {
                if self.stage == Stage::CameraImu && !self.try_imu_batch()? {
                    return Ok(());
                }
                if self.mode == SessionMode::FinalBatch {
                    return Ok(());
                }
                continue;
            }
            let Some(front) = self.queue.front() else {
                return Ok(());
            };
            if self.stage == Stage::CameraImu {
                let need = front.stamp_ns + imu_margin_ns(&self.cfg);
                if self.imu.last().is_none_or(|m| m.stamp_ns < need) {
                    return Ok(());
                }
            }
            let frame = self.queue.pop_front().expect("front exists");
            self.processed += 1;
            self.last_stamp_ns = frame.stamp_ns;
            let elapsed = (frame.stamp_ns - self.start_ns.unwrap_or(frame.stamp_ns)) as f64 * 1e-9;
            if elapsed > self.cfg.max_session_time {
                self.abort(format!("no result within {} s", self.cfg.max_session_time));
                return Ok(());
            }
            self.emit_detections(&frame);
            match self.stage {
                Stage::Camera => self.camera_frame(&frame)?,
                Stage::CameraImu => self.vi_frame(&frame)?,
            }
        }
        Ok(())
    }

    fn live(&mut self, t_ns: i64, t_fc: Pose) {
        self.live_pose = Some(t_fc);
        self.events.push(Event::LivePose { t_ns, t_fc });
    }

    fn emit_detections(&mut self, frame: &CameraFrame) {
        let cameras = (0..self.camera_count)
            .map(|i| {
                let (corners, pixels) = frame.camera(i).map(|o| (o.corner, [o.pixel.x, o.pixel.y])).unzip();
                protocol::CameraDetections {
                    camera: i,
                    corners,
                    pixels,
                }
            })
            .collect();
        self.events.push(Event::Detections {
            t_ns: frame.stamp_ns,
            frame: frame.index,
            cameras,
        });
    }

    fn camera_frame(&mut self, frame: &CameraFrame) -> Result<(), SessionError> {
        if self.mode == SessionMode::Initializing {
            if self.cam.try_initialize(frame, &self.cfg)? {
                self.set_mode(SessionMode::LiveCapture);
                self.metrics(self.cam.entropy(), None);
            }
            return Ok(());
        }
        let Some(t_fc) = self.cam.localize(frame, &self.cfg) else {
            return Ok(());
        };
        self.live(frame.stamp_ns, t_fc);
        match self.mode {
            SessionMode::LiveCapture => self.capture(frame, &t_fc),
            SessionMode::GuidingNbv => {
                let goal = self.nbv_goal.expect("guiding has a goal");
                let (dt, dr) = t_fc.error_to(&goal.t_fc);
                if dt <= self.cfg.nbv_arrival[0] && dr <= self.cfg.nbv_arrival[1] {
                    self.nbv_goal = None;
                    self.set_mode(SessionMode::LiveCapture);
                    // The suggested view was found informative, so the frame
                    // reaching it is kept even if its own MI falls just short.
                    // Gating it too could suggest the same view forever.
                    if frame.detections.len() < self.cfg.min_corners {
                        return Ok(());
                    }
                    let mi = self.cam.score(&t_fc, &frame.detections)?;
                    self.accept(frame, &t_fc, mi)
                } else if (frame.stamp_ns - goal.since_ns) as f64 * 1e-9 > self.cfg.nbv_timeout {
                    self.nbv_goal = None;
                    self.set_mode(SessionMode::FindNbv);
                    self.find_nbv()
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// Accepts the frame when it is informative enough; repeated rejections
    /// start a view search.
    fn capture(&mut self, frame: &CameraFrame, t_fc: &Pose) -> Result<(), SessionError> {
        if frame.detections.len() < self.cfg.min_corners {
            return Ok(());
        }
        let mi = self.cam.score(t_fc, &frame.detections)?;
        if mi >= self.cfg.info_threshold {
            return self.accept(frame, t_fc, mi);
        }
        self.cam.rejections += 1;
        if self.cam.rejections >= self.cfg.max_rejections {
            self.cam.rejections = 0;
            self.set_mode(SessionMode::FindNbv);
            self.find_nbv()?;
        }
        Ok(())
    }

    fn accept(&mut self, frame: &CameraFrame, t_fc: &Pose, mi: f64) -> Result<(), SessionError> {
        self.cam.accept(frame, t_fc, &self.cfg)?;
        self.metrics(self.cam.entropy(), Some(mi));
        Ok(())
    }

    fn find_nbv(&mut self) -> Result<(), SessionError> {
        let scores = self.cam.score_candidates(&self.cfg)?;
        let (best, mi) = scores
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, s| if s.1 > b.1 { s } else { b });
        self.metrics(self.cam.entropy(), Some(mi));
        if mi < self.cfg.info_threshold {
            self.set_mode(SessionMode::FinalBatch);
            return self.camera_batch();
        }
        let t_fc = self.cam.grid()[best].pose;
        self.nbv_goal = Some(NbvGoal {
            t_fc,
            since_ns: self.last_stamp_ns,
        });
        self.suggest(
            Suggestion::Nbv {
                candidate: self.cam.grid()[best].id,
                t_fc,
                mutual_info: mi,
                scores,
            },
            self.last_stamp_ns,
        );
        self.set_mode(SessionMode::GuidingNbv);
        Ok(())
    }

    fn camera_batch(&mut self) -> Result<(), SessionError> {
        let result = self.cam.final_batch(&self.cfg)?;
        self.events.push(Event::Result {
            stage: Stage::Camera,
            result: Box::new(result.clone()),
        });
        if self.plan == SessionPlan::CameraOnly {
            self.camera_result = Some(result);
            self.set_mode(SessionMode::Done);
            return Ok(());
        }
        self.vi = Some(ViStage::new(result.clone(), &self.cfg, self.camera_rate));
        self.camera_result = Some(result);
        self.stage = Stage::CameraImu;
        self.suggestion = None;
        self.set_mode(SessionMode::Initializing);
        Ok(())
    }

    fn vi_frame(&mut self, frame: &CameraFrame) -> Result<(), SessionError> {
        let vi = self.vi.as_mut().expect("camera-IMU stage has its estimator");
        let was_initialized = vi.is_initialized();
        let first_candidate = vi.first_candidate_ns();
        let Some(t_fc) = vi.process(frame, &self.imu, &self.cfg)? else {
            return Ok(());
        };
        self.live(frame.stamp_ns, t_fc);
        if !was_initialized {
            if !self.vi.as_ref().is_some_and(|v| v.is_initialized()) {
                return Ok(());
            }
            self.vi_first_ns = first_candidate.or(Some(frame.stamp_ns));
            self.set_mode(SessionMode::GuidingNbt);
        }
        let entropy = self.vi.as_ref().and_then(|v| v.entropy());
        self.metrics(entropy, None);
        self.maybe_snapshot(frame.stamp_ns);
        Ok(())
    }

    fn maybe_snapshot(&mut self, stamp_ns: i64) {
        if self.mode != SessionMode::GuidingNbt || self.outstanding.is_some() {
            return;
        }
        let due = self
            .last_snapshot_ns
            .is_none_or(|t| (stamp_ns - t) as f64 * 1e-9 >= self.cfg.snapshot_period);
        if !due {
            return;
        }
        let vi = self.vi.as_ref().expect("camera-IMU stage has its estimator");
        if let Some(req) = vi.snapshot(self.next_request, &self.cfg) {
            self.outstanding = Some(req.id);
            self.next_request += 1;
            self.last_snapshot_ns = Some(stamp_ns);
            self.request = Some(req);
        }
    }

    /// Runs the camera-IMU batch once the IMU stream covers the last frame.
    /// Returns false while waiting for data.
    fn try_imu_batch(&mut self) -> Result<bool, SessionError> {
        let finish = self.finish_ns.expect("final batch has an end");
        let first = self.vi_first_ns.expect("estimator was initialized");
        let bound = ((self.cfg.max_time_delay + 2.0 * self.cfg.imu.period()) * 1e9).ceil() as i64 + imu_margin_ns(&self.cfg);
        if self.imu.last().is_none_or(|m| m.stamp_ns < finish + bound) {
            return Ok(false);
        }
        let frames: Vec<CameraFrame> = self
            .frames
            .iter()
            .filter(|f| f.stamp_ns >= first && f.stamp_ns <= finish)
            .cloned()
            .collect();
        let imu: Vec<ImuMeasurement> = self
            .imu
            .iter()
            .filter(|m| m.stamp_ns >= first - bound && m.stamp_ns <= finish + bound)
            .copied()
            .collect();
        let camera = self.camera_result.as_ref().expect("camera stage finished");
        let result = calibrate_imu(&self.cfg.target, &frames, &imu, camera, &self.cfg)?;
        self.events.push(Event::Result {
            stage: Stage::CameraImu,
            result: Box::new(result.clone()),
        });
        self.imu_result = Some(result);
        self.set_mode(SessionMode::Done);
        Ok(true)
    }

    /// Names of the trajectories in evaluation order.
    pub fn trajectories(&self) -> [NbtName; 6] {
        NbtName::ALL
    }
}
