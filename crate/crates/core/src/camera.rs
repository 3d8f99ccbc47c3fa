//! Pinhole projection with radial-tangential (Brown-Conrady) distortion.
//!
//! ```text
//! x = X/Z, y = Y/Z, r² = x² + y²
//! radial = 1 + k1·r² + k2·r⁴
//! x_d = x·radial + 2·p1·x·y + p2·(r² + 2x²)
//! y_d = y·radial + p1·(r² + 2y²) + 2·p2·x·y
//! u = fx·x_d + cx,  v = fy·y_d + cy
//! ```
//!
//! The intrinsics vector is ordered `[fx, fy, cx, cy, k1, k2, p1, p2]`.

use nalgebra::{Matrix2, SMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Points closer than this to the image plane are rejected.
pub const Z_MIN: f64 = 1e-3;

pub const INTRINSICS_DIM: usize = 8;

pub type PointJacobian = SMatrix<f64, 2, 3>;
pub type IntrinsicsJacobian = SMatrix<f64, 2, INTRINSICS_DIM>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CameraError {
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("undistortion did not converge")]
    NoConvergence,
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// A projected pixel with an in-image flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    pub visible: bool,
}

/// Interface every projection model exposes to the factors.
pub trait ProjectionModel {
    fn param_count(&self) -> usize;
    fn project(&self, pt_cam: &Vector3<f64>) -> Result<Projection, CameraError>;
    /// Projection plus Jacobians w.r.t. the point and the model parameters
    /// (`2 × param_count`, stored in the first columns of the returned matrix).
    fn project_jacobians(
        &self,
        pt_cam: &Vector3<f64>,
    ) -> Result<(Projection, PointJacobian, IntrinsicsJacobian), CameraError>;
    fn backproject(&self, px: &Vector2<f64>) -> Result<Vector3<f64>, CameraError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub k1: f64,
    pub k2: f64,
    pub p1: f64,
    pub p2: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            k1: 0.0,
            k2: 0.0,
            p1: 0.0,
            p2: 0.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(CameraError::InvalidIntrinsics(format!("{self:?}")))
        }
    }

    pub fn params(&self) -> [f64; INTRINSICS_DIM] {
        [self.fx, self.fy, self.cx, self.cy, self.k1, self.k2, self.p1, self.p2]
    }

    pub fn with_params(&self, p: &[f64]) -> Self {
        Self {
            fx: p[0],
            fy: p[1],
            cx: p[2],
            cy: p[3],
            k1: p[4],
            k2: p[5],
            p1: p[6],
            p2: p[7],
            ..*self
        }
    }

    pub fn in_image(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }

    /// Applies distortion to normalized coordinates.
    pub fn distort(&self, x: f64, y: f64) -> Vector2<f64> {
        let r2 = x * x + y * y;
        let radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2;
        Vector2::new(
            x * radial + 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x),
            y * radial + self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y,
        )
    }

    fn distort_jacobian(&self, x: f64, y: f64) -> Matrix2<f64> {
        let r2 = x * x + y * y;
        let radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2;
        let dr = 2.0 * (self.k1 + 2.0 * self.k2 * r2);
        let (p1, p2) = (self.p1, self.p2);
        Matrix2::new(
            radial + x * x * dr + 2.0 * p1 * y + 6.0 * p2 * x,
            x * y * dr + 2.0 * p1 * x + 2.0 * p2 * y,
            x * y * dr + 2.0 * p1 * x + 2.0 * p2 * y,
            radial + y * y * dr + 6.0 * p1 * y + 2.0 * p2 * x,
        )
    }

    /// Inverts the distortion by Gauss-Newton on the 2D map.
    pub fn undistort(&self, xd: f64, yd: f64) -> Result<Vector2<f64>, CameraError> {
        let target = Vector2::new(xd, yd);
        let mut p = target;
        for _ in 0..100 {
            let r = self.distort(p.x, p.y) - target;
            if r.norm() < 1e-14 {
                return Ok(p);
            }
            let j = self.distort_jacobian(p.x, p.y);
            let step = j.lu().solve(&r).ok_or(CameraError::NoConvergence)?;
            p -= step;
            if step.norm() < 1e-10 {
                return Ok(p);
            }
        }
        Err(CameraError::NoConvergence)
    }
}

impl ProjectionModel for CameraIntrinsics {
    fn param_count(&self) -> usize {
        INTRINSICS_DIM
    }

    fn project(&self, pt: &Vector3<f64>) -> Result<Projection, CameraError> {
        if pt.z <= Z_MIN {
            return Err(CameraError::BehindCamera(pt.z));
        }
        let d = self.distort(pt.x / pt.z, pt.y / pt.z);
        let pixel = Vector2::new(self.fx * d.x + self.cx, self.fy * d.y + self.cy);
        Ok(Projection {
            pixel,
            visible: self.in_image(&pixel),
        })
    }

    fn project_jacobians(
        &self,
        pt: &Vector3<f64>,
    ) -> Result<(Projection, PointJacobian, IntrinsicsJacobian), CameraError> {
        let proj = self.project(pt)?;
        let iz = 1.0 / pt.z;
        let (x, y) = (pt.x * iz, pt.y * iz);
        let r2 = x * x + y * y;
        let d = self.distort(x, y);

        let dn_dp = SMatrix::<f64, 2, 3>::new(iz, 0.0, -x * iz, 0.0, iz, -y * iz);
        let f = Matrix2::new(self.fx, 0.0, 0.0, self.fy);
        let j_point = f * self.distort_jacobian(x, y) * dn_dp;

        let mut j_intr = IntrinsicsJacobian::zeros();
        j_intr[(0, 0)] = d.x;
        j_intr[(1, 1)] = d.y;
        j_intr[(0, 2)] = 1.0;
        j_intr[(1, 3)] = 1.0;
        j_intr[(0, 4)] = self.fx * x * r2;
        j_intr[(1, 4)] = self.fy * y * r2;
        j_intr[(0, 5)] = self.fx * x * r2 * r2;
        j_intr[(1, 5)] = self.fy * y * r2 * r2;
        j_intr[(0, 6)] = self.fx * 2.0 * x * y;
        j_intr[(1, 6)] = self.fy * (r2 + 2.0 * y * y);
        j_intr[(0, 7)] = self.fx * (r2 + 2.0 * x * x);
        j_intr[(1, 7)] = self.fy * 2.0 * x * y;
        Ok((proj, j_point, j_intr))
    }

    fn backproject(&self, px: &Vector2<f64>) -> Result<Vector3<f64>, CameraError> {
        let xd = (px.x - self.cx) / self.fx;
        let yd = (px.y - self.cy) / self.fy;
        let n = self.undistort(xd, yd)?;
        Ok(Vector3::new(n.x, n.y, 1.0).normalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::pinhole(500.0, 500.0, 320.0, 240.0, 640, 480)
    }

    #[test]
    fn projection_examples() {
        let c = cam();
        let p = c.project(&Vector3::new(0.0, 0.0, 2.0)).unwrap();
        assert_eq!(p.pixel, Vector2::new(320.0, 240.0));
        assert!(p.visible);
        let p = c.project(&Vector3::new(1.0, 0.0, 2.0)).unwrap();
        assert_relative_eq!(p.pixel, Vector2::new(570.0, 240.0), epsilon = 1e-12);
        let k = CameraIntrinsics { k1: 0.1, ..c };
        // x = 0.5, r² = 0.25, radial = 1.025 → u = 500·0.5125 + 320
        let p = k.project(&Vector3::new(1.0, 0.0, 2.0)).unwrap();
        assert_relative_eq!(p.pixel, Vector2::new(576.25, 240.0), epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_is_rejected() {
        assert!(matches!(
            cam().project(&Vector3::new(0.0, 0.0, -1.0)),
            Err(CameraError::BehindCamera(_))
        ));
        assert!(cam().project(&Vector3::new(0.0, 0.0, Z_MIN)).is_err());
    }

    #[test]
    fn out_of_image_is_flagged_not_rejected() {
        let p = cam().project(&Vector3::new(10.0, 0.0, 1.0)).unwrap();
        assert!(!p.visible);
        assert!(cam().project_jacobians(&Vector3::new(10.0, 0.0, 1.0)).is_ok());
    }

    #[test]
    fn jacobian_on_optical_axis() {
        let c = cam();
        let (_, jp, ji) = c.project_jacobians(&Vector3::new(0.0, 0.0, 2.0)).unwrap();
        let expect = PointJacobian::new(250.0, 0.0, 0.0, 0.0, 250.0, 0.0);
        assert_relative_eq!(jp, expect, epsilon = 1e-12);
        assert_eq!(ji[(0, 2)], 1.0);
        assert_eq!(ji[(1, 3)], 1.0);
    }

    #[test]
    fn backprojection_examples() {
        let c = cam();
        let b = c.backproject(&Vector2::new(320.0, 240.0)).unwrap();
        assert_relative_eq!(b, Vector3::z(), epsilon = 1e-15);
        let b = c.backproject(&Vector2::new(400.0, 100.0)).unwrap();
        let expect = Vector3::new(80.0 / 500.0, -140.0 / 500.0, 1.0).normalize();
        assert_relative_eq!(b, expect, epsilon = 1e-12);
    }

    #[test]
    fn backprojection_roundtrip_with_barrel_distortion() {
        let c = CameraIntrinsics {
            k1: -0.2,
            k2: 0.03,
            p1: 1e-3,
            p2: -5e-4,
            ..cam()
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let px = Vector2::new(rng.gen_range(1.0..639.0), rng.gen_range(1.0..479.0));
            let b = c.backproject(&px).unwrap();
            let back = c.project(&(b / b.z)).unwrap().pixel;
            worst = worst.max((back - px).norm());
        }
        assert!(worst < 1e-6, "worst round-trip error {worst}");
    }

    #[test]
    fn validation() {
        assert!(cam().validate().is_ok());
        assert!(CameraIntrinsics { fx: -1.0, ..cam() }.validate().is_err());
        assert!(CameraIntrinsics { cx: 700.0, ..cam() }.validate().is_err());
    }
}
