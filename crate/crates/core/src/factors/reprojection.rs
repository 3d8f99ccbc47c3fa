//! Reprojection residuals of target corners.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector2, Vector3};

use crate::camera::{CameraIntrinsics, ProjectionModel};
use crate::geometry::{skew, Quat};
use crate::solver::{BlockId, Evaluation, Factor, FactorError};

type Mat2x3 = SMatrix<f64, 2, 3>;

fn rot(p: &[f64]) -> Matrix3<f64> {
    Quat::from_xyzw([p[3], p[4], p[5], p[6]]).to_matrix()
}

fn trans(p: &[f64]) -> Vector3<f64> {
    Vector3::new(p[0], p[1], p[2])
}

/// Point Jacobians of `y = Rᵀ (x − t)` w.r.t. the pose tangent `[δp, δα]`
/// (left perturbation of `(R, t)`).
fn inverse_transform_jacobian(r: &Matrix3<f64>, t: &Vector3<f64>, x: &Vector3<f64>) -> SMatrix<f64, 3, 6> {
    let mut j = SMatrix::<f64, 3, 6>::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-r.transpose()));
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(r.transpose() * skew(&(x - t))));
    j
}

fn to_dyn<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}

/// Projects `p` and returns the whitened residual with `−J_h / σ`.
fn project_residual(
    intr: &CameraIntrinsics,
    p: &Vector3<f64>,
    pixel: &Vector2<f64>,
    sigma: f64,
) -> Result<(DVector<f64>, Mat2x3, SMatrix<f64, 2, 8>), FactorError> {
    let (proj, jp, ji) = intr
        .project_jacobians(p)
        .map_err(|e| FactorError::Excluded(e.to_string()))?;
    let r = (pixel - proj.pixel) / sigma;
    Ok((DVector::from_column_slice(r.as_slice()), -jp / sigma, -ji / sigma))
}

/// Camera-calibration reprojection of corner `r_F` seen by camera `i`.
///
/// Blocks: `T_FC1` (pose), `T_C1Ci` (pose, omitted for the reference camera),
/// intrinsics of camera `i` (8 parameters).
#[derive(Debug, Clone)]
pub struct CameraReprojection {
    blocks: Vec<BlockId>,
    has_extrinsics: bool,
    corner: Vector3<f64>,
    pixel: Vector2<f64>,
    sigma: f64,
    loss: Option<f64>,
    template: CameraIntrinsics,
}

impl CameraReprojection {
    /// `extrinsics` is `None` for the reference camera.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pose_fc: BlockId,
        extrinsics: Option<BlockId>,
        intrinsics: BlockId,
        template: CameraIntrinsics,
        corner: Vector3<f64>,
        pixel: Vector2<f64>,
        sigma: f64,
        loss: Option<f64>,
    ) -> Self {
        let mut blocks = vec![pose_fc];
        blocks.extend(extrinsics);
        blocks.push(intrinsics);
        Self {
            blocks,
            has_extrinsics: extrinsics.is_some(),
            corner,
            pixel,
            sigma,
            loss,
            template,
        }
    }

    /// Corner in the camera frame for the given parameters.
    pub fn point_in_camera(&self, params: &[&[f64]]) -> Vector3<f64> {
        let (rf, tf) = (rot(params[0]), trans(params[0]));
        let p1 = rf.transpose() * (self.corner - tf);
        if self.has_extrinsics {
            rot(params[1]).transpose() * (p1 - trans(params[1]))
        } else {
            p1
        }
    }
}

impl Factor for CameraReprojection {
    fn blocks(&self) -> &[BlockId] {
        &self.blocks
    }

    fn residual_dim(&self) -> usize {
        2
    }

    fn evaluate(&self, params: &[&[f64]], want: &[bool]) -> Result<Evaluation, FactorError> {
        let intr = self.template.with_params(params[params.len() - 1]);
        let (rf, tf) = (rot(params[0]), trans(params[0]));
        let p1 = rf.transpose() * (self.corner - tf);
        let (pc, d_pc_d_p1, ext) = if self.has_extrinsics {
            let (re, te) = (rot(params[1]), trans(params[1]));
            (re.transpose() * (p1 - te), re.transpose(), Some((re, te)))
        } else {
            (p1, Matrix3::identity(), None)
        };
        let (residual, jh, ji) = project_residual(&intr, &pc, &self.pixel, self.sigma)?;
        let mut jacobians = vec![None; self.blocks.len()];
        if want[0] {
            let j = jh * d_pc_d_p1 * inverse_transform_jacobian(&rf, &tf, &self.corner);
            jacobians[0] = Some(to_dyn(&j));
        }
        if let Some((re, te)) = ext {
            if want[1] {
                jacobians[1] = Some(to_dyn(&(jh * inverse_transform_jacobian(&re, &te, &p1))));
            }
        }
        let last = self.blocks.len() - 1;
        if want[last] {
            jacobians[last] = Some(to_dyn(&ji));
        }
        Ok(Evaluation { residual, jacobians })
    }

    fn loss_scale(&self) -> Option<f64> {
        self.loss
    }

    fn pixel_sigma(&self) -> Option<f64> {
        Some(self.sigma)
    }
}

/// Visual-inertial reprojection with fixed intrinsics and camera extrinsics.
///
/// Blocks: sensor state `x_WS`, `T_WF`, `T_SC1`. The corner maps as
/// `p_Ci = T_C1Ci⁻¹ T_SC1⁻¹ T_WS⁻¹ T_WF r_F`.
#[derive(Debug, Clone)]
pub struct ViReprojection {
    blocks: [BlockId; 3],
    /// Fixed `T_C1Ci` as `(R, t)`.
    extrinsics: (Matrix3<f64>, Vector3<f64>),
    intrinsics: CameraIntrinsics,
    corner: Vector3<f64>,
    pixel: Vector2<f64>,
    sigma: f64,
    loss: Option<f64>,
}

impl ViReprojection {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        state: BlockId,
        pose_wf: BlockId,
        extr_sc: BlockId,
        t_c1ci: &crate::geometry::Pose,
        intrinsics: CameraIntrinsics,
        corner: Vector3<f64>,
        pixel: Vector2<f64>,
        sigma: f64,
        loss: Option<f64>,
    ) -> Self {
        Self {
            blocks: [state, pose_wf, extr_sc],
            extrinsics: (t_c1ci.rotation_matrix(), *t_c1ci.translation()),
            intrinsics,
            corner,
            pixel,
            sigma,
            loss,
        }
    }
}

impl Factor for ViReprojection {
    fn blocks(&self) -> &[BlockId] {
        &self.blocks
    }

    fn residual_dim(&self) -> usize {
        2
    }

    fn evaluate(&self, params: &[&[f64]], want: &[bool]) -> Result<Evaluation, FactorError> {
        let (rs, ts) = (rot(params[0]), trans(params[0]));
        let (rw, tw) = (rot(params[1]), trans(params[1]));
        let (rc, tc) = (rot(params[2]), trans(params[2]));
        let (re, te) = &self.extrinsics;
        let rr = rw * self.corner;
        let pw = rr + tw;
        let ps = rs.transpose() * (pw - ts);
        let p1 = rc.transpose() * (ps - tc);
        let pc = re.transpose() * (p1 - te);
        let (residual, jh, _) = project_residual(&self.intrinsics, &pc, &self.pixel, self.sigma)?;
        let j1 = jh * re.transpose();
        let js = j1 * rc.transpose();
        let jw = js * rs.transpose();
        let mut jacobians = vec![None, None, None];
        if want[0] {
            let mut j = DMatrix::zeros(2, 15);
            let d = js * inverse_transform_jacobian(&rs, &ts, &pw);
            j.view_mut((0, 0), (2, 6)).copy_from(&d);
            jacobians[0] = Some(j);
        }
        if want[1] {
            let mut j = SMatrix::<f64, 2, 6>::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&jw);
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&(-jw * skew(&rr)));
            jacobians[1] = Some(to_dyn(&j));
        }
        if want[2] {
            jacobians[2] = Some(to_dyn(&(j1 * inverse_transform_jacobian(&rc, &tc, &ps))));
        }
        Ok(Evaluation { residual, jacobians })
    }

    fn loss_scale(&self) -> Option<f64> {
        self.loss
    }

    fn pixel_sigma(&self) -> Option<f64> {
        Some(self.sigma)
    }
}
