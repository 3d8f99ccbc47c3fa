//! Session configuration. Every tunable constant lives here and can be
//! overridden from a JSON file; missing fields take their defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imu::ImuNoiseParams;
use crate::solver::SolverOptions;
use crate::target::TargetSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config JSON: {0}")]
    Schema(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// NBV candidate grid geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NbvGridConfig {
    /// Viewing distances as multiples of the target diagonal.
    pub distance_factors: Vec<f64>,
    /// Lateral eye offset per grid step as a fraction of the target width/height.
    pub lateral_fraction: f64,
    /// Tilt of the oblique viewing directions [rad].
    pub tilt: f64,
}

impl Default for NbvGridConfig {
    fn default() -> Self {
        Self {
            distance_factors: vec![0.6, 0.9, 1.3],
            lateral_fraction: 0.25,
            tilt: 30f64.to_radians(),
        }
    }
}

/// Shared shape parameters of the six NBT primitives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NbtConfig {
    pub w_traj: f64,
    pub h_traj: f64,
    /// Squared radius of the sphere the trajectory lies on [m²].
    pub d_nbt: f64,
    pub phi_bound: f64,
    pub theta_bound: f64,
    /// Duration of one trajectory [s].
    pub t_nbt: f64,
}

impl Default for NbtConfig {
    fn default() -> Self {
        Self {
            w_traj: 0.2,
            h_traj: 0.2,
            d_nbt: 1.2 * 1.2,
            phi_bound: 30f64.to_radians(),
            theta_bound: 30f64.to_radians(),
            t_nbt: 3.0,
        }
    }
}

/// Standard deviations of the weak priors that keep the online problems
/// observable before enough views exist.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub focal_px: f64,
    pub center_px: f64,
    pub radial: f64,
    pub tangential: f64,
    pub extrinsic_translation: f64,
    pub extrinsic_rotation: f64,
    pub velocity: f64,
    pub gyro_bias: f64,
    pub accel_bias: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            focal_px: 100.0,
            center_px: 50.0,
            radial: 0.5,
            tangential: 0.05,
            extrinsic_translation: 0.1,
            extrinsic_rotation: 0.1,
            velocity: 1.0,
            gyro_bias: 0.1,
            accel_bias: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SessionConfig {
    pub target: TargetSpec,
    /// Minimum mutual information [nats] for a view or trajectory to count.
    pub info_threshold: f64,
    pub camera_window: usize,
    pub vi_window: usize,
    /// Cauchy loss scale on whitened reprojection residuals.
    pub cauchy_scale: f64,
    /// Detection noise assumed by the estimator [px].
    pub pixel_sigma: f64,
    pub imu: ImuNoiseParams,
    /// Frames used to initialize each stage.
    pub init_frames: usize,
    /// Consecutive rejected frames before searching for a next-best view.
    pub max_rejections: usize,
    /// Accelerometer standard deviation below which the sensor counts as static [m/s²].
    pub static_accel_std: f64,
    /// Interval between estimator snapshots sent to the trajectory evaluator [s].
    pub snapshot_period: f64,
    /// Hard limit on simulated session time [s].
    pub max_session_time: f64,
    /// Fisher condition number above which the motion is called degenerate.
    pub max_condition: f64,
    /// Rotation angle separating two camera viewpoints [rad].
    pub min_view_separation: f64,
    /// Smallest RMS angular rate about the second most excited axis for
    /// the camera-IMU lever arm to be observable [rad/s].
    pub min_rotation_rate: f64,
    /// Image size `[width, height]` assumed for every camera [px].
    pub image_size: [u32; 2],
    /// Fewest detected corners for a frame to be used.
    pub min_corners: usize,
    /// Every n-th frame of the camera-IMU stage becomes a state.
    pub vi_keyframe_stride: usize,
    /// Largest time delay magnitude the batch may explore [s].
    pub max_time_delay: f64,
    /// Reprojection inlier threshold for pose initialization [px].
    pub ransac_threshold: f64,
    /// Camera position/orientation distance at which a suggested view counts
    /// as reached [m, rad].
    pub nbv_arrival: [f64; 2],
    /// Time after which an unreached view is replaced by a new search [s].
    pub nbv_timeout: f64,
    pub nbv: NbvGridConfig,
    pub nbt: NbtConfig,
    pub priors: PriorConfig,
    pub solver: SolverOptions,
    pub seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            target: TargetSpec::default(),
            info_threshold: 0.2,
            camera_window: 10,
            vi_window: 3,
            cauchy_scale: 1.5,
            pixel_sigma: 1.0,
            imu: ImuNoiseParams::default(),
            init_frames: 5,
            max_rejections: 3,
            static_accel_std: 0.1,
            snapshot_period: 2.0,
            max_session_time: 600.0,
            max_condition: 1e12,
            min_view_separation: 5f64.to_radians(),
            min_rotation_rate: 0.1,
            image_size: [640, 480],
            min_corners: 8,
            vi_keyframe_stride: 3,
            max_time_delay: 0.25,
            ransac_threshold: 5.0,
            nbv_arrival: [0.05, 5f64.to_radians()],
            nbv_timeout: 10.0,
            nbv: NbvGridConfig::default(),
            nbt: NbtConfig::default(),
            priors: PriorConfig::default(),
            solver: SolverOptions::default(),
            seed: 0,
        }
    }
}

impl SessionConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        self.target.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.imu.validate().map_err(ConfigError::Invalid)?;
        if !(self.info_threshold > 0.0) {
            return bad("info_threshold must be positive");
        }
        if self.camera_window < 2 || self.vi_window < 2 {
            return bad("window sizes must be at least 2");
        }
        if !(self.cauchy_scale > 0.0) || !(self.pixel_sigma > 0.0) {
            return bad("cauchy_scale and pixel_sigma must be positive");
        }
        if self.init_frames == 0 || self.max_rejections == 0 {
            return bad("init_frames and max_rejections must be positive");
        }
        if !(self.snapshot_period > 0.0) || !(self.max_session_time > 0.0) || !(self.static_accel_std > 0.0) {
            return bad("periods and thresholds must be positive");
        }
        if !(self.min_view_separation > 0.0) || !(self.min_rotation_rate > 0.0) {
            return bad("periods and thresholds must be positive");
        }
        if self.nbv.distance_factors.is_empty() || self.nbv.distance_factors.iter().any(|d| !(*d > 0.0)) {
            return bad("nbv distance factors must be positive");
        }
        if self.image_size.contains(&0) || self.min_corners < 4 || self.vi_keyframe_stride == 0 {
            return bad("image size, min_corners (>= 4) and keyframe stride must be positive");
        }
        if !(self.max_time_delay >= 0.0) || !(self.ransac_threshold > 0.0) || !(self.nbv_timeout > 0.0) {
            return bad("time delay range, RANSAC threshold and NBV timeout must be valid");
        }
        let n = &self.nbt;
        if !(n.t_nbt > 0.0) || !(n.d_nbt > 0.0) || n.w_traj < 0.0 || n.h_traj < 0.0 {
            return bad("nbt durations and radii must be positive");
        }
        Ok(())
    }
}
