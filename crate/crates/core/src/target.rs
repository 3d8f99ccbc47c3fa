//! Planar grid-of-tags calibration target.
//!
//! Tags are numbered row-major starting at the origin; tag `(row, col)` has
//! its bottom-left corner at `(col, row) · tag_size · (1 + tag_spacing)`.
//! Each tag contributes four corners, counter-clockwise from bottom-left, so
//! corner `j` belongs to tag `j / 4`. The target plane is `z = 0` and the
//! printed face looks towards `+z`.

use nalgebra::{Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{CameraIntrinsics, ProjectionModel};
use crate::geometry::Pose;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TargetError {
    #[error("corner index {index} out of range (target has {count} corners)")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("invalid target spec: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub tag_rows: usize,
    pub tag_cols: usize,
    /// Tag edge length [m].
    pub tag_size: f64,
    /// Gap between tags as a fraction of `tag_size`.
    pub tag_spacing: f64,
}

impl Default for TargetSpec {
    fn default() -> Self {
        Self {
            tag_rows: 6,
            tag_cols: 6,
            tag_size: 0.088,
            tag_spacing: 0.3,
        }
    }
}

impl TargetSpec {
    pub fn validate(&self) -> Result<(), TargetError> {
        if self.tag_rows == 0 || self.tag_cols == 0 || self.tag_size <= 0.0 || self.tag_spacing <= 0.0 {
            return Err(TargetError::Invalid(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn corner_count(&self) -> usize {
        self.tag_rows * self.tag_cols * 4
    }

    pub fn stride(&self) -> f64 {
        self.tag_size * (1.0 + self.tag_spacing)
    }

    /// Extent along the target x-axis [m].
    pub fn width(&self) -> f64 {
        self.tag_cols as f64 * self.tag_size + (self.tag_cols - 1) as f64 * self.tag_size * self.tag_spacing
    }

    /// Extent along the target y-axis [m].
    pub fn height(&self) -> f64 {
        self.tag_rows as f64 * self.tag_size + (self.tag_rows - 1) as f64 * self.tag_size * self.tag_spacing
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::new(0.5 * self.width(), 0.5 * self.height(), 0.0)
    }

    pub fn diagonal(&self) -> f64 {
        self.width().hypot(self.height())
    }

    pub fn corner_position(&self, j: usize) -> Result<Vector3<f64>, TargetError> {
        if j >= self.corner_count() {
            return Err(TargetError::IndexOutOfRange {
                index: j,
                count: self.corner_count(),
            });
        }
        let tag = j / 4;
        let (row, col) = (tag / self.tag_cols, tag % self.tag_cols);
        let x0 = col as f64 * self.stride();
        let y0 = row as f64 * self.stride();
        let s = self.tag_size;
        let (dx, dy) = match j % 4 {
            0 => (0.0, 0.0),
            1 => (s, 0.0),
            2 => (s, s),
            _ => (0.0, s),
        };
        Ok(Vector3::new(x0 + dx, y0 + dy, 0.0))
    }

    pub fn corners(&self) -> Vec<Vector3<f64>> {
        (0..self.corner_count())
            .map(|j| self.corner_position(j).expect("index in range"))
            .collect()
    }
}

/// One detected target corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CornerObservation {
    pub camera: usize,
    pub frame: usize,
    pub corner: usize,
    pub pixel: Vector2<f64>,
    /// Capture time on the camera clock [ns].
    pub stamp_ns: i64,
}

impl CornerObservation {
    pub fn stamp(&self) -> f64 {
        self.stamp_ns as f64 * 1e-9
    }
}

/// Identifies the image a batch of simulated detections belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ImageTag {
    pub camera: usize,
    pub frame: usize,
    pub stamp_ns: i64,
}

/// Synthesizes corner detections for a camera at `t_cf` (target → camera).
///
/// A corner is detected when it lies in front of the camera, its noiseless
/// projection falls inside the image, and the camera sees the printed face.
pub fn simulate_detections(
    spec: &TargetSpec,
    cam: &CameraIntrinsics,
    t_cf: &Pose,
    noise_px: f64,
    seed: u64,
    tag: ImageTag,
) -> Vec<CornerObservation> {
    assert!(noise_px >= 0.0, "noise must be non-negative");
    // camera centre in the target frame must be on the printed side
    if t_cf.inverse().translation().z <= 0.0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise_px.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut out = Vec::new();
    for (j, r) in spec.corners().iter().enumerate() {
        let p = t_cf.transform_point(r);
        let Ok(proj) = cam.project(&p) else { continue };
        if !proj.visible {
            continue;
        }
        let pixel = if noise_px > 0.0 {
            proj.pixel + Vector2::new(normal.sample(&mut rng), normal.sample(&mut rng))
        } else {
            proj.pixel
        };
        if !cam.in_image(&pixel) {
            continue;
        }
        out.push(CornerObservation {
            camera: tag.camera,
            frame: tag.frame,
            corner: j,
            pixel,
            stamp_ns: tag.stamp_ns,
        });
    }
    out
}
