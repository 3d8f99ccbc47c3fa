//! Synthetic visual-inertial rig with ground truth.

pub mod dataset;
pub mod motion;
pub mod script;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::geometry::{look_at, Frame, Pose, Quat};
use crate::imu::{ImuBias, ImuMeasurement, ImuNoiseParams, SensorState};
use crate::target::{simulate_detections, ImageTag, TargetSpec};

pub use dataset::{CameraFrame, Dataset, DatasetError};
pub use motion::{Kinematics, Motion, Timeline};
pub use script::{Script, ScriptStep};

/// Ground-truth description of the simulated sensor and scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigSpec {
    pub cameras: Vec<CameraIntrinsics>,
    /// `T_C0Ci` per camera; the first is the identity.
    pub extrinsics: Vec<Pose>,
    /// `T_SC0`.
    pub sensor_camera: Pose,
    /// IMU stamp minus camera stamp for simultaneous events [s].
    pub time_delay: f64,
    pub imu: ImuNoiseParams,
    pub camera_rate: f64,
    /// Detection noise [px].
    pub pixel_sigma: f64,
    pub initial_bias: ImuBias,
    /// `T_WF`.
    pub fiducial: Pose,
    pub target: TargetSpec,
}

impl RigSpec {
    /// Stereo pair with a small IMU offset, looking at a wall-mounted target.
    pub fn default_stereo() -> Self {
        let cam0 = CameraIntrinsics {
            fx: 386.2,
            fy: 385.4,
            cx: 321.3,
            cy: 238.7,
            k1: -0.082,
            k2: 0.031,
            p1: 2.0e-4,
            p2: -3.0e-4,
            width: 640,
            height: 480,
        };
        let cam1 = CameraIntrinsics {
            fx: 384.9,
            fy: 384.1,
            cx: 318.6,
            cy: 241.2,
            k1: -0.076,
            k2: 0.027,
            p1: -1.0e-4,
            p2: 2.0e-4,
            ..cam0
        };
        let c0 = Frame::Camera(0);
        // target plane vertical: x_F horizontal, y_F up, z_F into the room
        let r_wf = nalgebra::Matrix3::from_columns(&[Vector3::x(), Vector3::z(), -Vector3::y()]);
        Self {
            cameras: vec![cam0, cam1],
            extrinsics: vec![
                Pose::identity(c0, c0),
                Pose::new(
                    c0,
                    Frame::Camera(1),
                    Quat::exp(&Vector3::new(0.002, -0.003, 0.001)),
                    Vector3::new(0.0501, 0.0003, -0.0002),
                ),
            ],
            sensor_camera: Pose::new(
                Frame::Sensor,
                c0,
                Quat::exp(&Vector3::new(0.01, -0.02, 0.015)),
                Vector3::new(-0.0052, 0.0049, 0.0117),
            ),
            time_delay: 0.003,
            imu: ImuNoiseParams::default(),
            camera_rate: 15.0,
            pixel_sigma: 1.0,
            initial_bias: ImuBias {
                gyro: Vector3::new(0.01, -0.008, 0.006),
                accel: Vector3::new(0.05, -0.04, 0.03),
            },
            fiducial: Pose::from_matrix(Frame::World, Frame::Fiducial, &r_wf, Vector3::new(-0.33, 1.0, 0.8)),
            target: TargetSpec::default(),
        }
    }

    /// The reference camera of [`RigSpec::default_stereo`] alone.
    pub fn default_mono() -> Self {
        let mut rig = Self::default_stereo();
        rig.cameras.truncate(1);
        rig.extrinsics.truncate(1);
        rig
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.cameras.is_empty() || self.cameras.len() != self.extrinsics.len() {
            return Err("need one extrinsic per camera".into());
        }
        for c in &self.cameras {
            c.validate().map_err(|e| e.to_string())?;
        }
        let (dt, dr) = self.extrinsics[0].error_to(&Pose::identity(Frame::Camera(0), Frame::Camera(0)));
        if dt > 0.0 || dr > 0.0 {
            return Err("reference camera extrinsics must be the identity".into());
        }
        if !(self.camera_rate > 0.0) || self.pixel_sigma < 0.0 {
            return Err("camera rate must be positive and pixel noise non-negative".into());
        }
        self.imu.validate()?;
        self.target.validate().map_err(|e| e.to_string())
    }

    /// Sensor pose putting the reference camera at `t_fc` (target frame).
    pub fn sensor_pose_for_camera(&self, t_fc: &Pose) -> Pose {
        self.fiducial
            .compose(t_fc)
            .and_then(|t_wc| t_wc.compose(&self.sensor_camera.inverse()))
            .expect("frames chain")
    }

    /// Slightly oblique starting view at about 0.8 m.
    pub fn start_pose(&self) -> Pose {
        let c = self.target.center();
        let eye = c + Vector3::new(0.12, -0.1, 0.8);
        let r = look_at(&eye, &c, &Vector3::y());
        self.sensor_pose_for_camera(&Pose::from_matrix(Frame::Fiducial, Frame::Camera(0), &r, eye))
    }

    /// Camera stamp of frame `k` [ns].
    pub fn frame_stamp_ns(&self, k: usize) -> i64 {
        (k as f64 * 1e9 / self.camera_rate).round() as i64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    /// Add white noise and bias random walk to the IMU.
    pub imu_noise: bool,
    /// IMU history before time zero [s].
    pub imu_lead: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            imu_noise: true,
            imu_lead: 0.5,
        }
    }
}

/// Noiseless IMU reading for the given motion, biases and gravity.
pub fn ideal_imu(k: &Kinematics, bias: &ImuBias, gravity: &Vector3<f64>, stamp_ns: i64) -> ImuMeasurement {
    let r_sw = k.pose.rotation().inverse();
    ImuMeasurement {
        stamp_ns,
        gyro: k.angular_velocity + bias.gyro,
        accel: r_sw.rotate(&(k.acceleration - gravity)) + bias.accel,
    }
}

/// Deterministic measurement generator driven by a [`Timeline`].
///
/// Time is the camera clock; the IMU sample taken at camera time `τ`
/// carries the stamp `τ + t_d`. IMU stamps lie on a fixed grid.
#[derive(Debug, Clone)]
pub struct Simulator {
    rig: RigSpec,
    opts: SimOptions,
    pub timeline: Timeline,
    seed: u64,
    now_ns: i64,
    next_frame: usize,
    next_imu: i64,
    imu_period_ns: i64,
    td_ns: i64,
    bias: ImuBias,
    bias_log: Vec<(i64, ImuBias)>,
    rng: ChaCha8Rng,
}

impl Simulator {
    pub fn new(rig: RigSpec, start: Pose, opts: SimOptions, seed: u64) -> Self {
        let imu_period_ns = (1e9 / rig.imu.rate).round() as i64;
        let td_ns = (rig.time_delay * 1e9).round() as i64;
        let first_imu = ((td_ns as f64 - opts.imu_lead * 1e9) / imu_period_ns as f64).floor() as i64;
        Self {
            bias: rig.initial_bias,
            rig,
            opts,
            timeline: Timeline::new(start),
            seed,
            now_ns: 0,
            next_frame: 0,
            next_imu: first_imu,
            imu_period_ns,
            td_ns,
            bias_log: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn rig(&self) -> &RigSpec {
        &self.rig
    }

    /// Current camera-clock time [s].
    pub fn now(&self) -> f64 {
        self.now_ns as f64 * 1e-9
    }

    pub fn now_ns(&self) -> i64 {
        self.now_ns
    }

    /// Time the next camera frame will be captured [ns].
    pub fn next_frame_ns(&self) -> i64 {
        self.rig.frame_stamp_ns(self.next_frame)
    }

    pub fn kinematics(&self, t: f64) -> Kinematics {
        self.timeline.at(t)
    }

    /// Ground-truth sensor state at camera time `t_ns`.
    pub fn true_state(&self, t_ns: i64) -> SensorState {
        let k = self.timeline.at(t_ns as f64 * 1e-9);
        let i = self.bias_log.partition_point(|(s, _)| *s <= t_ns + self.td_ns);
        let bias = self.bias_log.get(i.saturating_sub(1)).map_or(self.rig.initial_bias, |b| b.1);
        SensorState {
            p_ws: *k.pose.translation(),
            q_ws: *k.pose.rotation(),
            v_ws: k.velocity,
            b_g: bias.gyro,
            b_a: bias.accel,
        }
    }

    fn imu_sample(&mut self, stamp_ns: i64) -> ImuMeasurement {
        let t = (stamp_ns - self.td_ns) as f64 * 1e-9;
        let ideal = ideal_imu(&self.timeline.at(t), &self.bias, &self.rig.imu.gravity, stamp_ns);
        let (mut gyro, mut accel) = (ideal.gyro, ideal.accel);
        self.bias_log.push((stamp_ns, self.bias));
        if self.opts.imu_noise {
            let n = &self.rig.imu;
            let dt = n.period();
            let mut gauss = || Vector3::from_fn(|_, _| StandardNormal.sample(&mut self.rng));
            gyro += gauss() * (n.sigma_g / dt.sqrt());
            accel += gauss() * (n.sigma_a / dt.sqrt());
            let (wg, wa) = (gauss(), gauss());
            self.bias.gyro += wg * (n.sigma_bg * dt.sqrt());
            self.bias.accel += wa * (n.sigma_ba * dt.sqrt());
        }
        ImuMeasurement { stamp_ns, gyro, accel }
    }

    fn frame(&self, index: usize) -> CameraFrame {
        let stamp_ns = self.rig.frame_stamp_ns(index);
        let t_ws = self.timeline.at(stamp_ns as f64 * 1e-9).pose;
        let mut detections = Vec::new();
        for (i, (cam, t_c0ci)) in self.rig.cameras.iter().zip(&self.rig.extrinsics).enumerate() {
            let t_wc = t_ws
                .compose(&self.rig.sensor_camera)
                .and_then(|t| t.compose(t_c0ci))
                .expect("frames chain");
            let t_cf = t_wc.inverse().compose(&self.rig.fiducial).expect("frames chain");
            let seed = (self.seed ^ ((index as u64) << 8 | i as u64)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let tag = ImageTag {
                camera: i,
                frame: index,
                stamp_ns,
            };
            detections.extend(simulate_detections(
                &self.rig.target,
                cam,
                &t_cf,
                self.rig.pixel_sigma,
                seed,
                tag,
            ));
        }
        CameraFrame {
            index,
            stamp_ns,
            detections,
        }
    }

    /// Advances the clock to `t_ns`, returning the camera frames captured
    /// and the IMU samples taken up to then.
    pub fn advance_to(&mut self, t_ns: i64) -> (Vec<CameraFrame>, Vec<ImuMeasurement>) {
        self.now_ns = self.now_ns.max(t_ns);
        let mut imu = Vec::new();
        while self.next_imu * self.imu_period_ns - self.td_ns <= self.now_ns {
            let s = self.next_imu * self.imu_period_ns;
            imu.push(self.imu_sample(s));
            self.next_imu += 1;
        }
        let mut frames = Vec::new();
        while self.rig.frame_stamp_ns(self.next_frame) <= self.now_ns {
            frames.push(self.frame(self.next_frame));
            self.next_frame += 1;
        }
        (frames, imu)
    }

    /// Advances by `dt` seconds.
    pub fn step(&mut self, dt: f64) -> (Vec<CameraFrame>, Vec<ImuMeasurement>) {
        assert!(dt > 0.0, "step must move time forward");
        self.advance_to(self.now_ns + (dt * 1e9).round() as i64)
    }
}
