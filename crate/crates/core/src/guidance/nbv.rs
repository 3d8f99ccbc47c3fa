//! Fixed grid of next-best-view candidates in front of the target.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraIntrinsics, ProjectionModel};
use crate::config::NbvGridConfig;
use crate::geometry::{look_at, rot_x, rot_y, Frame, Pose};
use crate::target::TargetSpec;

/// Viewing direction of a candidate relative to the target normal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tilt {
    Frontal,
    /// Rotated about the target x-axis by `+tilt`.
    XPos,
    XNeg,
    /// Rotated about the target y-axis by `+tilt`.
    YPos,
    YNeg,
}

impl Tilt {
    pub const ALL: [Tilt; 5] = [Tilt::Frontal, Tilt::XPos, Tilt::XNeg, Tilt::YPos, Tilt::YNeg];

    fn direction(self, angle: f64) -> Vector3<f64> {
        let z = Vector3::z();
        match self {
            Tilt::Frontal => z,
            Tilt::XPos => rot_x(angle) * z,
            Tilt::XNeg => rot_x(-angle) * z,
            Tilt::YPos => rot_y(angle) * z,
            Tilt::YNeg => rot_y(-angle) * z,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NbvCandidate {
    pub id: usize,
    /// Reference camera pose in the target frame.
    pub pose: Pose,
    pub ring: usize,
    /// Lateral grid offsets in `-1..=1`.
    pub ix: i32,
    pub iy: i32,
    pub tilt: Tilt,
}

/// Deterministic candidate grid: distance rings × 3×3 lateral offsets × 5
/// viewing directions, every camera looking at the target centre with image
/// "down" along −y_F.
pub fn build_nbv_grid(target: &TargetSpec, cfg: &NbvGridConfig) -> Vec<NbvCandidate> {
    let center = target.center();
    let diag = target.diagonal();
    let up = Vector3::y();
    let mut out = Vec::new();
    for (ring, factor) in cfg.distance_factors.iter().enumerate() {
        for iy in -1..=1 {
            for ix in -1..=1 {
                for tilt in Tilt::ALL {
                    let offset = Vector3::new(
                        ix as f64 * cfg.lateral_fraction * target.width(),
                        iy as f64 * cfg.lateral_fraction * target.height(),
                        0.0,
                    );
                    let eye = center + offset + tilt.direction(cfg.tilt) * (factor * diag);
                    let r = look_at(&eye, &center, &up);
                    out.push(NbvCandidate {
                        id: out.len(),
                        pose: Pose::from_matrix(Frame::Fiducial, Frame::Camera(0), &r, eye),
                        ring,
                        ix,
                        iy,
                        tilt,
                    });
                }
            }
        }
    }
    out
}

/// Fraction of target corners projecting inside the image from `t_fc`.
pub fn visible_fraction(target: &TargetSpec, cam: &CameraIntrinsics, t_fc: &Pose) -> f64 {
    let t_cf = t_fc.inverse();
    let corners = target.corners();
    let seen = corners
        .iter()
        .filter(|c| cam.project(&t_cf.transform_point(c)).is_ok_and(|p| p.visible))
        .count();
    seen as f64 / corners.len() as f64
}
