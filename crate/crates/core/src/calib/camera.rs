//! Intrinsics and multi-camera extrinsics from corner detections.

use std::sync::Arc;

use nalgebra::{DMatrix, Vector2};
use rayon::prelude::*;

use super::{CalibError, CalibResult, Covariance, ThetaBlock};
use crate::camera::{CameraIntrinsics, INTRINSICS_DIM};
use crate::config::{PriorConfig, SessionConfig};
use crate::factors::{CameraReprojection, GaussianPrior};
use crate::geometry::{Frame, Pose};
use crate::guidance::init::{estimate_homography, focal_from_homography};
use crate::guidance::{solve_pnp, Stage};
use crate::info::marginal_entropy;
use crate::sim::CameraFrame;
use crate::solver::{marginal_information, solve, BlockId, BlockKind, Problem, SolverError};
use crate::target::{CornerObservation, TargetSpec};

/// Factor graph of the camera stage: one `T_FC0` per view, intrinsics per
/// camera and `T_C0Ci` per non-reference camera.
#[derive(Debug, Clone)]
pub struct CameraGraph {
    pub problem: Problem,
    pub intrinsics: Vec<BlockId>,
    /// `None` for the reference camera.
    pub extrinsics: Vec<Option<BlockId>>,
    templates: Vec<CameraIntrinsics>,
    target: TargetSpec,
    sigma: f64,
    loss: f64,
}

impl CameraGraph {
    pub fn new(target: &TargetSpec, cameras: &[CameraIntrinsics], extrinsics: &[Pose], sigma: f64, loss: f64) -> Self {
        let mut problem = Problem::new();
        let intrinsics = cameras
            .iter()
            .map(|c| problem.add_block(BlockKind::Euclidean(INTRINSICS_DIM), c.params().to_vec(), 1))
            .collect();
        let extrinsics = extrinsics
            .iter()
            .enumerate()
            .map(|(i, e)| (i > 0).then(|| problem.add_block(BlockKind::Pose, e.to_params().to_vec(), 1)))
            .collect();
        Self {
            problem,
            intrinsics,
            extrinsics,
            templates: cameras.to_vec(),
            target: *target,
            sigma,
            loss,
        }
    }

    pub fn camera_count(&self) -> usize {
        self.templates.len()
    }

    /// Calibration parameters: all intrinsics, then the extrinsics.
    pub fn theta(&self) -> Vec<BlockId> {
        self.intrinsics
            .iter()
            .copied()
            .chain(self.extrinsics.iter().flatten().copied())
            .collect()
    }

    pub fn theta_layout(&self) -> Vec<ThetaBlock> {
        let intr = (0..self.camera_count()).map(|i| ThetaBlock {
            name: format!("intrinsics_cam{i}"),
            dim: INTRINSICS_DIM,
        });
        let extr = (1..self.camera_count()).map(|i| ThetaBlock {
            name: format!("extrinsics_cam0_cam{i}"),
            dim: 6,
        });
        intr.chain(extr).collect()
    }

    /// Weak Gaussian priors at the current estimates.
    pub fn add_priors(&mut self, p: &PriorConfig) -> Result<(), SolverError> {
        let intr_sigmas = [
            p.focal_px,
            p.focal_px,
            p.center_px,
            p.center_px,
            p.radial,
            p.radial,
            p.tangential,
            p.tangential,
        ];
        let pose_sigmas = [
            p.extrinsic_translation,
            p.extrinsic_translation,
            p.extrinsic_translation,
            p.extrinsic_rotation,
            p.extrinsic_rotation,
            p.extrinsic_rotation,
        ];
        let mut priors = Vec::new();
        for &id in &self.intrinsics {
            let mean = self.problem.values(id)?.to_vec();
            priors.push(GaussianPrior::isotropic(id, BlockKind::Euclidean(INTRINSICS_DIM), mean, &intr_sigmas));
        }
        for &id in self.extrinsics.iter().flatten() {
            let mean = self.problem.values(id)?.to_vec();
            priors.push(GaussianPrior::isotropic(id, BlockKind::Pose, mean, &pose_sigmas));
        }
        for prior in priors {
            self.problem.add_factor(Arc::new(prior))?;
        }
        Ok(())
    }

    /// Adds a view block and its reprojection factors to `problem`, which
    /// must contain this graph's calibration blocks.
    pub fn add_view_to(
        &self,
        problem: &mut Problem,
        t_fc: &Pose,
        obs: &[CornerObservation],
    ) -> Result<BlockId, SolverError> {
        let pose = problem.add_block(BlockKind::Pose, t_fc.to_params().to_vec(), 0);
        for o in obs {
            let Ok(corner) = self.target.corner_position(o.corner) else {
                continue;
            };
            problem.add_factor(Arc::new(CameraReprojection::new(
                pose,
                self.extrinsics[o.camera],
                self.intrinsics[o.camera],
                self.templates[o.camera],
                corner,
                o.pixel,
                self.sigma,
                Some(self.loss),
            )))?;
        }
        Ok(pose)
    }

    pub fn add_view(&mut self, t_fc: &Pose, obs: &[CornerObservation]) -> Result<BlockId, SolverError> {
        let mut problem = std::mem::take(&mut self.problem);
        let id = self.add_view_to(&mut problem, t_fc, obs);
        self.problem = problem;
        id
    }

    pub fn camera(&self, i: usize) -> CameraIntrinsics {
        let values = self.problem.values(self.intrinsics[i]).expect("intrinsics block");
        self.templates[i].with_params(values)
    }

    pub fn cameras(&self) -> Vec<CameraIntrinsics> {
        (0..self.camera_count()).map(|i| self.camera(i)).collect()
    }

    /// `T_C0Ci`.
    pub fn extrinsic(&self, i: usize) -> Pose {
        match self.extrinsics[i] {
            Some(id) => Pose::from_params(
                Frame::Camera(0),
                Frame::Camera(i as u8),
                self.problem.values(id).expect("extrinsics block"),
            ),
            None => Pose::identity(Frame::Camera(0), Frame::Camera(0)),
        }
    }

    pub fn extrinsics(&self) -> Vec<Pose> {
        (0..self.camera_count()).map(|i| self.extrinsic(i)).collect()
    }

    /// `T_FC0` of a view block.
    pub fn view_pose(&self, id: BlockId) -> Result<Pose, SolverError> {
        Ok(Pose::from_params(Frame::Fiducial, Frame::Camera(0), self.problem.values(id)?))
    }
}

/// Pinhole guess from homography focal estimates (median over views).
///
/// Falls back to a 90° horizontal field of view when no view constrains the
/// focal length, e.g. when all views are fronto-parallel.
pub fn initial_intrinsics(
    target: &TargetSpec,
    frames: &[CameraFrame],
    camera: usize,
    size: [u32; 2],
    min_corners: usize,
) -> CameraIntrinsics {
    let (w, h) = (size[0] as f64, size[1] as f64);
    let center = Vector2::new(0.5 * w, 0.5 * h);
    let mut focals: Vec<f64> = frames
        .iter()
        .filter_map(|f| {
            let obs: Vec<&CornerObservation> = f.camera(camera).collect();
            if obs.len() < min_corners.max(8) {
                return None;
            }
            let src: Vec<Vector2<f64>> = obs
                .iter()
                .map(|o| target.corner_position(o.corner).map(|c| c.xy()))
                .collect::<Result<_, _>>()
                .ok()?;
            let dst: Vec<Vector2<f64>> = obs.iter().map(|o| o.pixel).collect();
            focal_from_homography(&estimate_homography(&src, &dst)?, &center)
        })
        .filter(|f| f.is_finite() && *f > 0.1 * w && *f < 10.0 * w)
        .collect();
    focals.sort_by(f64::total_cmp);
    let f = if focals.is_empty() {
        0.5 * w / 45f64.to_radians().tan()
    } else {
        focals[focals.len() / 2]
    };
    CameraIntrinsics::pinhole(f, f, center.x, center.y, size[0], size[1])
}

/// `T_FC0` of one frame by PnP on its best-covered camera.
pub fn estimate_view_pose(
    target: &TargetSpec,
    cameras: &[CameraIntrinsics],
    extrinsics: &[Pose],
    frame: &CameraFrame,
    min_corners: usize,
    inlier_px: f64,
    seed: u64,
) -> Option<Pose> {
    let (cam, count) = (0..cameras.len())
        .map(|i| (i, frame.camera(i).count()))
        .max_by_key(|&(i, n)| (n, std::cmp::Reverse(i)))?;
    if count < min_corners.max(6) {
        return None;
    }
    let obs: Vec<CornerObservation> = frame.camera(cam).copied().collect();
    let t_fci = solve_pnp(target, &cameras[cam], &obs, inlier_px, seed)
        .ok()?
        .relabel(Frame::Fiducial, Frame::Camera(cam as u8));
    if cam == 0 {
        Some(t_fci)
    } else {
        t_fci.compose(&extrinsics[cam].inverse()).ok()
    }
}

/// `T_C0Ci` from the frame where both cameras see the most corners.
pub(crate) fn initial_extrinsic(
    target: &TargetSpec,
    cameras: &[CameraIntrinsics],
    frames: &[CameraFrame],
    i: usize,
    cfg: &SessionConfig,
) -> Result<Pose, CalibError> {
    let need = cfg.min_corners.max(6);
    let best = frames
        .iter()
        .map(|f| (f, f.camera(0).count().min(f.camera(i).count())))
        .filter(|(_, n)| *n >= need)
        .max_by_key(|&(f, n)| (n, std::cmp::Reverse(f.index)))
        .map(|(f, _)| f)
        .ok_or_else(|| CalibError::NotEnoughData(format!("cameras 0 and {i} never see the target together")))?;
    let pnp = |c: usize| {
        let obs: Vec<CornerObservation> = best.camera(c).copied().collect();
        solve_pnp(target, &cameras[c], &obs, cfg.ransac_threshold, cfg.seed ^ best.index as u64)
            .map(|p| p.relabel(Frame::Fiducial, Frame::Camera(c as u8)))
    };
    let (t_fc0, t_fci) = (pnp(0)?, pnp(i)?);
    Ok(t_fc0.inverse().compose(&t_fci).expect("frames chain"))
}

/// Marginal covariance and entropy of `theta`, refusing ill-conditioned
/// information.
pub(crate) fn theta_summary(
    problem: &Problem,
    theta: &[BlockId],
    max_condition: f64,
) -> Result<(DMatrix<f64>, f64), CalibError> {
    let unobservable = |condition: f64| {
        CalibError::InsufficientExcitation(format!(
            "Fisher condition number {condition:.3e} exceeds {max_condition:.1e}"
        ))
    };
    let info = match marginal_information(problem, theta) {
        Ok(info) => info,
        Err(SolverError::RankDeficient { .. }) => return Err(unobservable(f64::INFINITY)),
        Err(e) => return Err(e.into()),
    };
    let condition = info.scaled_condition();
    if !(condition <= max_condition) {
        return Err(unobservable(condition));
    }
    let chol = info
        .information
        .clone()
        .cholesky()
        .ok_or_else(|| unobservable(f64::INFINITY))?;
    let cov = chol.inverse();
    Ok(((&cov + cov.transpose()) * 0.5, marginal_entropy(&info)))
}

/// Number of view orientations pairwise further apart than `separation`,
/// picked greedily in input order.
pub fn distinct_orientations<'a>(poses: impl IntoIterator<Item = &'a Pose>, separation: f64) -> usize {
    let mut kept: Vec<&Pose> = Vec::new();
    for p in poses {
        if kept.iter().all(|k| p.rotation().boxminus(k.rotation()).norm() > separation) {
            kept.push(p);
        }
    }
    kept.len()
}

/// Full-batch camera calibration over all frames.
pub fn calibrate_cameras(
    target: &TargetSpec,
    frames: &[CameraFrame],
    camera_count: usize,
    cfg: &SessionConfig,
) -> Result<CalibResult, CalibError> {
    let frames: Vec<CameraFrame> = frames
        .iter()
        .filter(|f| f.detections.len() >= cfg.min_corners)
        .cloned()
        .collect();
    if frames.is_empty() || camera_count == 0 {
        return Err(CalibError::NotEnoughData("no frame sees the target".into()));
    }
    let cameras: Vec<CameraIntrinsics> = (0..camera_count)
        .map(|i| initial_intrinsics(target, &frames, i, cfg.image_size, cfg.min_corners))
        .collect();
    let mut extrinsics = vec![Pose::identity(Frame::Camera(0), Frame::Camera(0))];
    for i in 1..camera_count {
        extrinsics.push(initial_extrinsic(target, &cameras, &frames, i, cfg)?);
    }
    let poses: Vec<(usize, Pose)> = frames
        .par_iter()
        .enumerate()
        .filter_map(|(k, f)| {
            estimate_view_pose(
                target,
                &cameras,
                &extrinsics,
                f,
                cfg.min_corners,
                cfg.ransac_threshold,
                cfg.seed ^ f.index as u64,
            )
            .map(|p| (k, p))
        })
        .collect();
    if poses.is_empty() {
        return Err(CalibError::NotEnoughData("no view could be initialized".into()));
    }
    let distinct = distinct_orientations(poses.iter().map(|(_, p)| p), cfg.min_view_separation);
    if distinct < 2 {
        return Err(CalibError::RankDeficient(format!(
            "{distinct} distinct viewpoint, focal length and distortion need at least two"
        )));
    }

    let mut graph = CameraGraph::new(target, &cameras, &extrinsics, cfg.pixel_sigma, cfg.cauchy_scale);
    for (k, t_fc) in &poses {
        graph.add_view(t_fc, &frames[*k].detections)?;
    }
    let report = solve(&mut graph.problem, &cfg.solver)?;
    let theta = graph.theta();
    let (cov, entropy) = theta_summary(&graph.problem, &theta, cfg.max_condition)?;
    let covariance = Covariance::from_matrix(&cov);
    let camera_covariances = (0..camera_count)
        .map(|i| covariance.block(i * INTRINSICS_DIM, INTRINSICS_DIM))
        .collect();
    Ok(CalibResult {
        stage: Stage::Camera,
        cameras: graph.cameras(),
        camera_covariances,
        extrinsics: graph.extrinsics(),
        sensor_camera: None,
        time_delay: None,
        theta: graph.theta_layout(),
        covariance,
        entropy,
        rmse_px: report.rmse_px.unwrap_or(f64::NAN),
        frames: poses.len(),
        report,
    })
}
