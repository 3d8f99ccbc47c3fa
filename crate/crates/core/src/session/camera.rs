//! Online camera stage: fixed-lag view window, MI gating and NBV search.

use std::collections::VecDeque;

use rayon::prelude::*;

use crate::calib::camera::initial_extrinsic;
use crate::calib::{calibrate_cameras, estimate_view_pose, initial_intrinsics, CalibError, CalibResult, CameraGraph};
use crate::camera::CameraIntrinsics;
use crate::config::SessionConfig;
use crate::geometry::{Frame, Pose};
use crate::guidance::{build_nbv_grid, NbvCandidate};
use crate::info::{marginal_entropy, score_against};
use crate::sim::CameraFrame;
use crate::solver::{marginal_information, marginalize, solve, BlockId, MarginalInformation, SolverOptions};
use crate::target::{simulate_detections, CornerObservation, ImageTag, TargetSpec};

/// Solver settings of the online window: priors keep it well posed, and a
/// few iterations per frame suffice because the estimate moves little.
pub(crate) fn online_solver(cfg: &SessionConfig) -> SolverOptions {
    SolverOptions {
        max_iterations: 10,
        check_rank: false,
        ..cfg.solver
    }
}

/// Noiseless detections of every camera with the reference camera at `t_fc0`.
pub fn simulate_view(
    target: &TargetSpec,
    cameras: &[CameraIntrinsics],
    extrinsics: &[Pose],
    t_fc0: &Pose,
) -> Vec<CornerObservation> {
    let mut out = Vec::new();
    for (i, (cam, t_c0ci)) in cameras.iter().zip(extrinsics).enumerate() {
        let Ok(t_fci) = t_fc0.compose(t_c0ci) else {
            continue;
        };
        let tag = ImageTag {
            camera: i,
            frame: 0,
            stamp_ns: 0,
        };
        out.extend(simulate_detections(target, cam, &t_fci.inverse(), 0.0, 0, tag));
    }
    out
}

#[derive(Debug)]
pub(crate) struct CameraStage {
    target: TargetSpec,
    camera_count: usize,
    init: Vec<CameraFrame>,
    graph: Option<CameraGraph>,
    window: VecDeque<BlockId>,
    baseline: Option<MarginalInformation>,
    /// Frames that enter the final batch.
    pub accepted: Vec<CameraFrame>,
    pub rejections: usize,
    grid: Vec<NbvCandidate>,
    pub rmse_px: Option<f64>,
}

impl CameraStage {
    pub fn new(cfg: &SessionConfig, camera_count: usize) -> Self {
        Self {
            target: cfg.target,
            camera_count,
            init: Vec::new(),
            graph: None,
            window: VecDeque::new(),
            baseline: None,
            accepted: Vec::new(),
            rejections: 0,
            grid: build_nbv_grid(&cfg.target, &cfg.nbv),
            rmse_px: None,
        }
    }

    pub fn grid(&self) -> &[NbvCandidate] {
        &self.grid
    }

    pub fn views(&self) -> usize {
        self.accepted.len()
    }

    /// Collects frames until `cfg.init_frames` see the target, then builds
    /// the window from them. Returns whether the stage is initialized.
    pub fn try_initialize(&mut self, frame: &CameraFrame, cfg: &SessionConfig) -> Result<bool, CalibError> {
        if frame.camera(0).count() < cfg.min_corners {
            return Ok(false);
        }
        self.init.push(frame.clone());
        if self.init.len() < cfg.init_frames {
            return Ok(false);
        }
        match self.build(cfg) {
            Ok(()) => {
                self.accepted = std::mem::take(&mut self.init);
                Ok(true)
            }
            Err(CalibError::NotEnoughData(_)) => {
                // e.g. the second camera has not seen the target yet
                self.init.remove(0);
                Ok(false)
            }
            Err(e) => Err(e),
        }
    }

    fn build(&mut self, cfg: &SessionConfig) -> Result<(), CalibError> {
        let cameras: Vec<CameraIntrinsics> = (0..self.camera_count)
            .map(|i| initial_intrinsics(&self.target, &self.init, i, cfg.image_size, cfg.min_corners))
            .collect();
        let mut extrinsics = vec![Pose::identity(Frame::Camera(0), Frame::Camera(0))];
        for i in 1..self.camera_count {
            extrinsics.push(initial_extrinsic(&self.target, &cameras, &self.init, i, cfg)?);
        }
        let mut graph = CameraGraph::new(&self.target, &cameras, &extrinsics, cfg.pixel_sigma, cfg.cauchy_scale);
        graph.add_priors(&cfg.priors)?;
        let mut window = VecDeque::new();
        for f in &self.init {
            let t_fc = self
                .pose_with(&cameras, &extrinsics, f, cfg)
                .ok_or_else(|| CalibError::NotEnoughData("initial view could not be localized".into()))?;
            window.push_back(graph.add_view(&t_fc, &f.detections)?);
        }
        self.graph = Some(graph);
        self.window = window;
        self.refine(cfg)
    }

    fn pose_with(
        &self,
        cameras: &[CameraIntrinsics],
        extrinsics: &[Pose],
        frame: &CameraFrame,
        cfg: &SessionConfig,
    ) -> Option<Pose> {
        estimate_view_pose(
            &self.target,
            cameras,
            extrinsics,
            frame,
            cfg.min_corners,
            cfg.ransac_threshold,
            cfg.seed ^ frame.index as u64,
        )
    }

    fn graph(&self) -> &CameraGraph {
        self.graph.as_ref().expect("camera stage initialized")
    }

    /// `T_FC0` of `frame` under the current estimate.
    pub fn localize(&self, frame: &CameraFrame, cfg: &SessionConfig) -> Option<Pose> {
        let g = self.graph.as_ref()?;
        self.pose_with(&g.cameras(), &g.extrinsics(), frame, cfg)
    }

    /// Solves the window, marginalizes views beyond its size and refreshes
    /// the MI baseline.
    fn refine(&mut self, cfg: &SessionConfig) -> Result<(), CalibError> {
        let graph = self.graph.as_mut().expect("camera stage initialized");
        let report = solve(&mut graph.problem, &online_solver(cfg))?;
        self.rmse_px = report.rmse_px;
        while self.window.len() > cfg.camera_window {
            let oldest = self.window.pop_front().expect("window is non-empty");
            marginalize(&mut graph.problem, &[oldest])?;
        }
        self.baseline = Some(marginal_information(&graph.problem, &graph.theta())?);
        Ok(())
    }

    /// MI of adding `obs` seen from `t_fc`.
    pub fn score(&self, t_fc: &Pose, obs: &[CornerObservation]) -> Result<f64, CalibError> {
        let g = self.graph();
        let baseline = self.baseline.as_ref().expect("baseline follows every solve");
        let score = score_against(baseline, &g.problem, &g.theta(), 0, |p| {
            g.add_view_to(p, t_fc, obs).map(|_| ())
        })
        .map_err(info_err)?;
        Ok(score.mutual_info)
    }

    pub fn accept(&mut self, frame: &CameraFrame, t_fc: &Pose, cfg: &SessionConfig) -> Result<(), CalibError> {
        let graph = self.graph.as_mut().expect("camera stage initialized");
        let id = graph.add_view(t_fc, &frame.detections)?;
        self.window.push_back(id);
        self.accepted.push(frame.clone());
        self.rejections = 0;
        self.refine(cfg)
    }

    /// MI of every grid candidate under the current estimate.
    pub fn score_candidates(&self, cfg: &SessionConfig) -> Result<Vec<f64>, CalibError> {
        let g = self.graph();
        let (cameras, extrinsics) = (g.cameras(), g.extrinsics());
        self.grid
            .par_iter()
            .map(|c| {
                let obs = simulate_view(&self.target, &cameras, &extrinsics, &c.pose);
                if obs.len() < cfg.min_corners {
                    return Ok(0.0);
                }
                self.score(&c.pose, &obs)
            })
            .collect()
    }

    pub fn entropy(&self) -> Option<f64> {
        self.baseline.as_ref().map(marginal_entropy)
    }

    pub fn final_batch(&self, cfg: &SessionConfig) -> Result<CalibResult, CalibError> {
        calibrate_cameras(&self.target, &self.accepted, self.camera_count, cfg)
    }
}

pub(crate) fn info_err(e: crate::info::InfoError) -> CalibError {
    match e {
        crate::info::InfoError::Solver(s) => s.into(),
        crate::info::InfoError::NotPositiveDefinite => CalibError::RankDeficient("posterior is not positive definite".into()),
    }
}
