//! Frame-labelled rigid transforms and quaternion manifold algebra.
//!
//! Quaternions follow the Hamilton convention and are stored as an imaginary
//! part `eta = [x, y, z]` and a real part `eps`. Serialized arrays use the
//! same order, `[x, y, z, w]`. Rotations are passive (`R_AB` maps coordinates
//! expressed in `B` into `A`) and the manifold update is left-multiplicative:
//!
//! ```text
//! q ⊞ δα = Exp(δα) ⊗ q
//! T ⊞ [δp, δα] = (Exp(δα) ⊗ q, p + δp)
//! ```
//!
//! A [`Pose`] named `T_AB` has `to = A` and `from = B`, and composing two poses
//! whose labels do not chain is an error.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Below this rotation angle exp/log switch to a Taylor expansion.
pub const SMALL_ANGLE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GeometryError {
    #[error("frame mismatch: cannot compose {left_to}<-{left_from} with {right_to}<-{right_from}")]
    FrameMismatch {
        left_to: Frame,
        left_from: Frame,
        right_to: Frame,
        right_from: Frame,
    },
    #[error("invalid frame label `{0}`")]
    InvalidFrame(String),
}

/// Coordinate frame label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Frame {
    World,
    Fiducial,
    Sensor,
    /// Camera `i`; camera 0 is the reference camera.
    Camera(u8),
}

impl fmt::Display for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Frame::World => write!(f, "W"),
            Frame::Fiducial => write!(f, "F"),
            Frame::Sensor => write!(f, "S"),
            Frame::Camera(i) => write!(f, "C{i}"),
        }
    }
}

impl FromStr for Frame {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "W" => Ok(Frame::World),
            "F" => Ok(Frame::Fiducial),
            "S" => Ok(Frame::Sensor),
            _ => s
                .strip_prefix('C')
                .and_then(|i| i.parse::<u8>().ok())
                .map(Frame::Camera)
                .ok_or_else(|| GeometryError::InvalidFrame(s.to_string())),
        }
    }
}

impl Serialize for Frame {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Frame {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Skew-symmetric matrix such that `skew(a) * b == a.cross(&b)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Unit Hamilton quaternion with non-negative real part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quat {
    eta: Vector3<f64>,
    eps: f64,
}

impl Default for Quat {
    fn default() -> Self {
        Self::identity()
    }
}

impl Quat {
    pub fn identity() -> Self {
        Self {
            eta: Vector3::zeros(),
            eps: 1.0,
        }
    }

    /// Normalizes and canonicalizes (`eps >= 0`). Panics on a zero quaternion.
    pub fn new(eta: Vector3<f64>, eps: f64) -> Self {
        let n = (eta.norm_squared() + eps * eps).sqrt();
        assert!(n > 0.0 && n.is_finite(), "quaternion must be non-zero and finite");
        let s = if eps < 0.0 { -1.0 / n } else { 1.0 / n };
        Self {
            eta: eta * s,
            eps: eps * s,
        }
    }

    /// From `[x, y, z, w]`.
    pub fn from_xyzw(c: [f64; 4]) -> Self {
        Self::new(Vector3::new(c[0], c[1], c[2]), c[3])
    }

    pub fn to_xyzw(&self) -> [f64; 4] {
        [self.eta.x, self.eta.y, self.eta.z, self.eps]
    }

    pub fn eta(&self) -> &Vector3<f64> {
        &self.eta
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn norm(&self) -> f64 {
        (self.eta.norm_squared() + self.eps * self.eps).sqrt()
    }

    /// Hamilton product `self ⊗ rhs`.
    pub fn mul(&self, rhs: &Quat) -> Quat {
        let (a, aw) = (&self.eta, self.eps);
        let (b, bw) = (&rhs.eta, rhs.eps);
        Quat::new(aw * b + bw * a + a.cross(b), aw * bw - a.dot(b))
    }

    pub fn inverse(&self) -> Quat {
        Quat {
            eta: -self.eta,
            eps: self.eps,
        }
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        let t = 2.0 * self.eta.cross(v);
        v + self.eps * t + self.eta.cross(&t)
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let (x, y, z, w) = (self.eta.x, self.eta.y, self.eta.z, self.eps);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    pub fn from_matrix(m: &Matrix3<f64>) -> Quat {
        let rot = Rotation3::from_matrix(m);
        let uq = UnitQuaternion::from_rotation_matrix(&rot);
        let q = uq.quaternion();
        Quat::new(Vector3::new(q.i, q.j, q.k), q.w)
    }

    /// Exponential map from a rotation vector.
    pub fn exp(phi: &Vector3<f64>) -> Quat {
        let theta = phi.norm();
        if theta < SMALL_ANGLE {
            // second-order Taylor expansion
            Quat::new(phi * (0.5 - theta * theta / 48.0), 1.0 - theta * theta / 8.0)
        } else {
            let half = 0.5 * theta;
            Quat::new(phi * (half.sin() / theta), half.cos())
        }
    }

    /// Logarithm map to a rotation vector with angle in `[0, π]`.
    pub fn log(&self) -> Vector3<f64> {
        let n = self.eta.norm();
        if n < SMALL_ANGLE {
            // eps ~ 1 here, 2·atan(n/eps)/n ≈ (2/eps)(1 - n²/(3 eps²))
            let e = self.eps;
            self.eta * (2.0 / e) * (1.0 - n * n / (3.0 * e * e))
        } else {
            let theta = 2.0 * n.atan2(self.eps);
            self.eta * (theta / n)
        }
    }

    /// `Exp(dalpha) ⊗ self`.
    pub fn boxplus(&self, dalpha: &Vector3<f64>) -> Quat {
        if *dalpha == Vector3::zeros() {
            return *self;
        }
        Quat::exp(dalpha).mul(self)
    }

    /// Inverse of [`Quat::boxplus`]: `Log(self ⊗ base⁻¹)`.
    pub fn boxminus(&self, base: &Quat) -> Vector3<f64> {
        self.mul(&base.inverse()).log()
    }

    pub fn angle_to(&self, other: &Quat) -> f64 {
        self.boxminus(other).norm()
    }
}

impl From<UnitQuaternion<f64>> for Quat {
    fn from(q: UnitQuaternion<f64>) -> Self {
        let q = q.quaternion();
        Quat::new(Vector3::new(q.i, q.j, q.k), q.w)
    }
}

impl Serialize for Quat {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_xyzw().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Quat {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let c = <[f64; 4]>::deserialize(d)?;
        let n = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n.is_finite() && n > 0.0) {
            return Err(serde::de::Error::custom("quaternion must be non-zero and finite"));
        }
        // keep stored unit quaternions bit-exact so files round-trip
        if (n - 1.0).abs() < 1e-12 && c[3] >= 0.0 {
            return Ok(Quat {
                eta: Vector3::new(c[0], c[1], c[2]),
                eps: c[3],
            });
        }
        Ok(Quat::from_xyzw(c))
    }
}

/// SO(3) right Jacobian `J_r(φ)`: `Exp(φ + δ) ≈ Exp(φ) Exp(J_r(φ) δ)`.
pub fn so3_right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-5 {
        Matrix3::identity() - 0.5 * k + k * k / 6.0
    } else {
        let t2 = theta * theta;
        Matrix3::identity() - (1.0 - theta.cos()) / t2 * k + (theta - theta.sin()) / (t2 * theta) * k * k
    }
}

/// SO(3) left Jacobian `J_l(φ) = J_r(-φ)`.
pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    so3_right_jacobian(&-phi)
}

/// Inverse of the left Jacobian: `Log(Exp(δ) Exp(φ)) ≈ φ + J_l⁻¹(φ) δ`.
pub fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-5 {
        Matrix3::identity() - 0.5 * k + k * k / 12.0
    } else {
        let half = 0.5 * theta;
        let c = (1.0 - half * half.cos() / half.sin()) / (theta * theta);
        Matrix3::identity() - 0.5 * k + c * k * k
    }
}

/// Rigid transform `T_to,from` mapping points expressed in `from` into `to`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub to: Frame,
    pub from: Frame,
    #[serde(rename = "q")]
    rotation: Quat,
    #[serde(rename = "t")]
    translation: Vector3<f64>,
}

impl Pose {
    pub fn new(to: Frame, from: Frame, rotation: Quat, translation: Vector3<f64>) -> Self {
        Self {
            to,
            from,
            rotation,
            translation,
        }
    }

    pub fn identity(to: Frame, from: Frame) -> Self {
        Self::new(to, from, Quat::identity(), Vector3::zeros())
    }

    pub fn from_matrix(to: Frame, from: Frame, r: &Matrix3<f64>, t: Vector3<f64>) -> Self {
        Self::new(to, from, Quat::from_matrix(r), t)
    }

    pub fn rotation(&self) -> &Quat {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_matrix()
    }

    /// `self ∘ rhs`, requiring `self.from == rhs.to`.
    pub fn compose(&self, rhs: &Pose) -> Result<Pose, GeometryError> {
        if self.from != rhs.to {
            return Err(GeometryError::FrameMismatch {
                left_to: self.to,
                left_from: self.from,
                right_to: rhs.to,
                right_from: rhs.from,
            });
        }
        Ok(Pose {
            to: self.to,
            from: rhs.from,
            rotation: self.rotation.mul(&rhs.rotation),
            translation: self.rotation.rotate(&rhs.translation) + self.translation,
        })
    }

    pub fn inverse(&self) -> Pose {
        let qi = self.rotation.inverse();
        Pose {
            to: self.from,
            from: self.to,
            rotation: qi,
            translation: -qi.rotate(&self.translation),
        }
    }

    pub fn transform_point(&self, pt: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(pt) + self.translation
    }

    /// Tangent update `[δp, δα]`.
    pub fn boxplus(&self, delta: &Vector6<f64>) -> Pose {
        let dp = Vector3::new(delta[0], delta[1], delta[2]);
        let da = Vector3::new(delta[3], delta[4], delta[5]);
        Pose {
            to: self.to,
            from: self.from,
            rotation: self.rotation.boxplus(&da),
            translation: self.translation + dp,
        }
    }

    /// Inverse of [`Pose::boxplus`]; labels must match.
    pub fn boxminus(&self, base: &Pose) -> Result<Vector6<f64>, GeometryError> {
        if self.to != base.to || self.from != base.from {
            return Err(GeometryError::FrameMismatch {
                left_to: self.to,
                left_from: self.from,
                right_to: base.to,
                right_from: base.from,
            });
        }
        let dp = self.translation - base.translation;
        let da = self.rotation.boxminus(&base.rotation);
        Ok(Vector6::new(dp.x, dp.y, dp.z, da.x, da.y, da.z))
    }

    /// Same transform under different labels.
    pub fn relabel(&self, to: Frame, from: Frame) -> Pose {
        Pose { to, from, ..*self }
    }

    /// Parameter-block layout `[tx, ty, tz, qx, qy, qz, qw]`.
    pub fn to_params(&self) -> [f64; 7] {
        let q = self.rotation.to_xyzw();
        [
            self.translation.x,
            self.translation.y,
            self.translation.z,
            q[0],
            q[1],
            q[2],
            q[3],
        ]
    }

    pub fn from_params(to: Frame, from: Frame, p: &[f64]) -> Pose {
        Pose::new(
            to,
            from,
            Quat::from_xyzw([p[3], p[4], p[5], p[6]]),
            Vector3::new(p[0], p[1], p[2]),
        )
    }

    /// Translation distance and rotation angle to another pose with the same labels.
    pub fn error_to(&self, other: &Pose) -> (f64, f64) {
        (
            (self.translation - other.translation).norm(),
            self.rotation.angle_to(&other.rotation),
        )
    }
}

/// Rotation matrix from intrinsic x-y-z Euler angles: `Rx(roll) Ry(pitch) Rz(yaw)`.
pub fn euler_xyz(roll: f64, pitch: f64, yaw: f64) -> Matrix3<f64> {
    rot_x(roll) * rot_y(pitch) * rot_z(yaw)
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Rotation whose z-axis points from `eye` to `target`, with the y-axis as
/// close as possible to `-up` (image "down" opposite the up vector).
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Matrix3<f64> {
    let z = (target - eye).normalize();
    let mut y = -(up - z * z.dot(up));
    if y.norm() < 1e-9 {
        // up parallel to the viewing direction; pick any perpendicular
        let alt = if z.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        y = alt - z * z.dot(&alt);
    }
    let y = y.normalize();
    let x = y.cross(&z);
    Matrix3::from_columns(&[x, y, z])
}
