//! Batch calibration pipelines and their result files.
//!
//! The same functions serve the offline CLI and the final batch of a guided
//! session, so a recorded session reproduces its online result exactly.

pub mod camera;
pub mod vi;

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::CameraIntrinsics;
use crate::geometry::Pose;
use crate::guidance::{InitError, Stage};
use crate::imu::ImuError;
use crate::solver::{SolveReport, SolverError};

pub use camera::{calibrate_cameras, distinct_orientations, estimate_view_pose, initial_intrinsics, CameraGraph};
pub use vi::{calibrate_imu, initialize_vi, rotational_excitation, ViGraph, ViInit};

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("not enough data: {0}")]
    NotEnoughData(String),
    #[error("information matrix is rank deficient: {0}")]
    RankDeficient(String),
    #[error("insufficient excitation: {0}")]
    InsufficientExcitation(String),
    #[error("initialization failed: {0}")]
    Init(#[from] InitError),
    #[error(transparent)]
    Imu(#[from] ImuError),
    #[error(transparent)]
    Solver(SolverError),
}

impl From<SolverError> for CalibError {
    fn from(e: SolverError) -> Self {
        match e {
            SolverError::RankDeficient { .. } | SolverError::SingularBlock(_) => Self::RankDeficient(e.to_string()),
            e => Self::Solver(e),
        }
    }
}

impl CalibError {
    /// Whether the data cannot constrain the parameters (as opposed to bad input).
    pub fn is_unobservable(&self) -> bool {
        matches!(self, Self::RankDeficient(_) | Self::InsufficientExcitation(_))
    }
}

/// Dense matrix stored row-major with explicit dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Covariance {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Covariance {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.transpose().as_slice().to_vec(),
        }
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn block(&self, start: usize, n: usize) -> Covariance {
        Self::from_matrix(&self.to_matrix().view((start, start), (n, n)).into_owned())
    }
}

/// One calibration parameter block inside `Σ_θθ`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaBlock {
    pub name: String,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibResult {
    pub stage: Stage,
    pub cameras: Vec<CameraIntrinsics>,
    /// Marginal 8×8 covariance of each camera's intrinsics.
    pub camera_covariances: Vec<Covariance>,
    /// `T_C0Ci`; the first entry is the identity.
    pub extrinsics: Vec<Pose>,
    /// `T_SC0`, camera-IMU stage only.
    pub sensor_camera: Option<Pose>,
    /// IMU minus camera clock [s], camera-IMU stage only.
    pub time_delay: Option<f64>,
    /// Layout of `covariance`.
    pub theta: Vec<ThetaBlock>,
    /// Marginal covariance `Σ_θθ` of the calibration parameters.
    pub covariance: Covariance,
    /// Differential entropy of `Σ_θθ` [nats].
    pub entropy: f64,
    pub rmse_px: f64,
    /// Frames used by the batch.
    pub frames: usize,
    pub report: SolveReport,
}

#[derive(Debug, Error)]
pub enum ResultFileError {
    #[error("cannot access {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed result {path}: {source}")]
    Json { path: String, source: serde_json::Error },
}

impl CalibResult {
    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes") + "\n"
    }

    pub fn write(&self, path: &Path) -> Result<(), ResultFileError> {
        std::fs::write(path, self.to_json()).map_err(|source| ResultFileError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, ResultFileError> {
        let text = std::fs::read_to_string(path).map_err(|source| ResultFileError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| ResultFileError::Json {
            path: path.display().to_string(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covariance_is_row_major() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let c = Covariance::from_matrix(&m);
        assert_eq!(c.data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(c.to_matrix(), m);
        let sq = Covariance::from_matrix(&DMatrix::from_fn(3, 3, |i, j| (3 * i + j) as f64));
        assert_eq!(sq.block(1, 2).data, vec![4.0, 5.0, 7.0, 8.0]);
    }
}
