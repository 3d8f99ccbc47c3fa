//! Simulated sessions: the simulator feeding an [`Engine`], an autopilot
//! that follows the suggestions, and replay of recorded sessions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{evaluate_nbts, Engine, EvalResult, Event, SessionError, SessionPlan, SessionRecord, Suggestion};
use crate::calib::CalibResult;
use crate::config::SessionConfig;
use crate::geometry::Pose;
use crate::guidance::{build_nbt_set, NbtSpec, SessionMode, Stage};
use crate::sim::{Dataset, Motion, RigSpec, SimOptions, Simulator};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriverOptions {
    pub seed: u64,
    pub sim: SimOptions,
    /// Bandwidth of the simulated operator moving to a view [Hz].
    pub steer_bandwidth_hz: f64,
    /// Time to move to the start of a trajectory [s].
    pub approach_time: f64,
}

impl Default for DriverOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            sim: SimOptions::default(),
            steer_bandwidth_hz: 2.0,
            approach_time: 2.0,
        }
    }
}

/// Results and recording of a finished session.
#[derive(Debug, Clone)]
pub struct SessionOutcome {
    pub camera: Option<CalibResult>,
    pub imu: Option<CalibResult>,
    pub aborted: Option<String>,
    pub record: SessionRecord,
    pub dataset: Dataset,
    /// Camera-clock time at the end [s].
    pub sim_time: f64,
}

impl SessionOutcome {
    fn from_engine(engine: &Engine, sim_time: f64) -> Self {
        let (record, dataset) = engine.record();
        Self {
            camera: engine.camera_result().cloned(),
            imu: engine.imu_result().cloned(),
            aborted: engine.aborted().map(str::to_owned),
            record,
            dataset,
            sim_time,
        }
    }
}

/// Simulated operator that performs every suggestion as soon as it appears.
#[derive(Debug, Clone)]
pub struct Autopilot {
    rig: RigSpec,
    specs: Vec<NbtSpec>,
    opts: DriverOptions,
    used: Option<u64>,
    /// View goal and the time of the last correction toward it.
    nbv: Option<(Pose, f64)>,
    frozen: bool,
    /// Camera time the current trajectory ends [s].
    busy_until: f64,
}

impl Autopilot {
    pub fn new(rig: &RigSpec, cfg: &SessionConfig, opts: DriverOptions) -> Self {
        Self {
            rig: rig.clone(),
            specs: build_nbt_set(&rig.target, &cfg.nbt),
            opts,
            used: None,
            nbv: None,
            frozen: false,
            busy_until: 0.0,
        }
    }

    pub fn update(&mut self, engine: &Engine, sim: &mut Simulator) {
        let now = sim.now();
        if engine.stage() == Stage::CameraImu && !self.frozen {
            // come to rest so the estimator can initialize
            let k = sim.kinematics(now);
            sim.timeline.push(now, Motion::steer_from(&k, k.pose, self.opts.steer_bandwidth_hz));
            self.frozen = true;
        }
        if engine.mode() != SessionMode::GuidingNbv {
            self.nbv = None;
        } else if let (Some((goal, last)), Some(est)) = (self.nbv, engine.live_pose()) {
            self.correct(engine, sim, &goal, est, last);
        }
        let Some(active) = engine.suggestion() else {
            return;
        };
        if self.used == Some(active.seq) {
            return;
        }
        match (&active.suggestion, engine.stage()) {
            (Suggestion::Nbv { t_fc, .. }, Stage::Camera) => {
                steer(sim, &self.rig, t_fc, self.opts.steer_bandwidth_hz);
                self.nbv = Some((*t_fc, now));
                self.used = Some(active.seq);
            }
            (Suggestion::Nbt { name, .. }, Stage::CameraImu) => {
                let fresh = active.stamp_ns as f64 * 1e-9 >= self.busy_until;
                if now < self.busy_until || !fresh || engine.mode() != SessionMode::GuidingNbt {
                    return;
                }
                let spec = *self.specs.iter().find(|s| s.name == *name).expect("all trajectories are built");
                let start = self
                    .rig
                    .fiducial
                    .compose(&spec.pose(0.0).expect("valid trajectory"))
                    .expect("frames chain");
                let k = sim.kinematics(now);
                let at_rest = sim.timeline.settle_time().is_some_and(|t| t <= now);
                let approach = self.opts.approach_time;
                let motion = if at_rest {
                    Motion::Transit {
                        from: k.pose,
                        to: start,
                        duration: approach,
                    }
                } else {
                    Motion::steer_from(&k, start, 2.5 / approach)
                };
                sim.timeline.push(now, motion);
                sim.timeline.push(now + approach, Motion::Nbt { spec, t_wf: self.rig.fiducial });
                self.busy_until = now + approach + spec.t_nbt;
                self.used = Some(active.seq);
            }
            _ => {}
        }
    }
}

impl Autopilot {
    /// Like an operator watching the live overlay, moves until the
    /// estimated pose, not the true one, matches the goal.
    fn correct(&mut self, engine: &Engine, sim: &mut Simulator, goal: &Pose, est: &Pose, last: f64) {
        let now = sim.now();
        if now - last < CORRECTION_PERIOD {
            return;
        }
        let [tol_t, tol_r] = engine.config().nbv_arrival;
        let (dt, dr) = est.error_to(goal);
        if dt <= tol_t && dr <= tol_r {
            return;
        }
        let t_ws = sim.kinematics(now).pose;
        let t_fc = self
            .rig
            .fiducial
            .inverse()
            .compose(&t_ws)
            .and_then(|t| t.compose(&self.rig.sensor_camera))
            .and_then(|t| t.compose(&est.inverse()))
            .and_then(|t| t.compose(goal))
            .expect("frames chain");
        steer(sim, &self.rig, &t_fc, self.opts.steer_bandwidth_hz);
        self.nbv = Some((*goal, now));
    }
}

/// Seconds between corrections toward a view.
const CORRECTION_PERIOD: f64 = 0.6;

/// Moves the rig so the reference camera approaches `t_fc`.
pub fn steer(sim: &mut Simulator, rig: &RigSpec, t_fc: &Pose, bandwidth_hz: f64) {
    let now = sim.now();
    let k = sim.kinematics(now);
    sim.timeline
        .push(now, Motion::steer_from(&k, rig.sensor_pose_for_camera(t_fc), bandwidth_hz));
}

/// A simulator wired to an engine.
#[derive(Debug)]
pub struct SimSession {
    pub engine: Engine,
    pub sim: Simulator,
    pub rig: RigSpec,
    pub autopilot: Option<Autopilot>,
    pub opts: DriverOptions,
}

impl SimSession {
    pub fn new(
        cfg: SessionConfig,
        rig: RigSpec,
        plan: SessionPlan,
        opts: DriverOptions,
        autopilot: bool,
    ) -> Result<Self, SessionError> {
        rig.validate().map_err(SessionError::Config)?;
        let pilot = autopilot.then(|| Autopilot::new(&rig, &cfg, opts));
        let engine = Engine::new(cfg, rig.cameras.len(), rig.camera_rate, plan)?;
        let sim = Simulator::new(rig.clone(), rig.start_pose(), opts.sim, opts.seed);
        Ok(Self {
            engine,
            sim,
            rig,
            autopilot: pilot,
            opts,
        })
    }

    /// Advances one camera period. With `lockstep`, evaluations run inline
    /// right after they are issued.
    pub fn step(&mut self, lockstep: bool) -> Result<(), SessionError> {
        let (frames, imu) = self.sim.advance_to(self.sim.next_frame_ns());
        self.engine.push_imu(&imu)?;
        if lockstep {
            self.service()?;
        }
        for f in &frames {
            self.engine.push_frame(f)?;
            if lockstep {
                self.service()?;
            }
        }
        if let Some(pilot) = &mut self.autopilot {
            pilot.update(&self.engine, &mut self.sim);
        }
        Ok(())
    }

    fn service(&mut self) -> Result<(), SessionError> {
        while let Some(req) = self.engine.take_eval_request() {
            let res = evaluate_nbts(&req)?;
            self.engine.apply_evaluation(&res)?;
        }
        Ok(())
    }

    pub fn steer(&mut self, t_fc: &Pose) {
        steer(&mut self.sim, &self.rig, t_fc, self.opts.steer_bandwidth_hz);
    }

    pub fn outcome(&self) -> SessionOutcome {
        let mut out = SessionOutcome::from_engine(&self.engine, self.sim.now());
        out.dataset.truth = Some(self.rig.clone());
        out
    }
}

/// Runs a complete autopilot session with inline evaluations.
pub fn run_simulated(
    cfg: SessionConfig,
    rig: RigSpec,
    plan: SessionPlan,
    opts: DriverOptions,
    mut on_event: impl FnMut(&Event),
) -> Result<SessionOutcome, SessionError> {
    let mut s = SimSession::new(cfg, rig, plan, opts, true)?;
    s.engine.start();
    loop {
        let stepped = s.step(true);
        s.engine.drain_events().iter().for_each(&mut on_event);
        stepped?;
        if !s.engine.is_running() {
            break;
        }
    }
    Ok(s.outcome())
}

/// Feeds a recording back through a fresh engine, applying each evaluation
/// after the same number of frames as in the original run.
pub fn replay(
    record: &SessionRecord,
    data: &Dataset,
    mut on_event: impl FnMut(&Event),
) -> Result<SessionOutcome, SessionError> {
    let mut engine = Engine::new(
        record.config.clone(),
        record.camera_count,
        record.camera_rate,
        record.plan.clone(),
    )?;
    engine.start();
    let mut pending: BTreeMap<u64, EvalResult> = BTreeMap::new();
    let mut marks = record.marks.iter().peekable();
    let mut run = |engine: &mut Engine| -> Result<(), SessionError> {
        while let Some(req) = engine.take_eval_request() {
            pending.insert(req.id, evaluate_nbts(&req)?);
        }
        while let Some(m) = marks.next_if(|m| m.after_frames <= engine.frames_processed()) {
            let res = pending.remove(&m.request).ok_or(SessionError::UnexpectedEvaluation {
                got: m.request,
                expected: None,
            })?;
            engine.apply_evaluation(&res)?;
            while let Some(req) = engine.take_eval_request() {
                pending.insert(req.id, evaluate_nbts(&req)?);
            }
        }
        Ok(())
    };
    engine.push_imu(&data.imu)?;
    run(&mut engine)?;
    let mut last = 0;
    for f in data.frames() {
        if !engine.is_running() {
            break;
        }
        last = f.stamp_ns;
        let pushed = engine.push_frame(&f).and_then(|_| run(&mut engine));
        engine.drain_events().iter().for_each(&mut on_event);
        pushed?;
    }
    Ok(SessionOutcome::from_engine(&engine, last as f64 * 1e-9))
}
