//! Analytic sensor motion: holds, minimum-jerk transits, NBT playback and
//! filtered steering.

use nalgebra::Vector3;

use crate::geometry::{so3_left_jacobian_inv, so3_right_jacobian, Frame, Pose, Quat};
use crate::guidance::NbtSpec;

/// Sensor pose and its derivatives at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kinematics {
    /// `T_WS`.
    pub pose: Pose,
    /// Velocity in the world frame [m/s].
    pub velocity: Vector3<f64>,
    /// Acceleration in the world frame, without gravity [m/s²].
    pub acceleration: Vector3<f64>,
    /// Angular velocity in the sensor frame [rad/s].
    pub angular_velocity: Vector3<f64>,
}

impl Kinematics {
    pub fn at_rest(pose: Pose) -> Self {
        Self {
            pose,
            velocity: Vector3::zeros(),
            acceleration: Vector3::zeros(),
            angular_velocity: Vector3::zeros(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Motion {
    Hold(Pose),
    /// Minimum-jerk move between two rest poses.
    Transit { from: Pose, to: Pose, duration: f64 },
    /// Trajectory playback with the target at `t_wf`.
    Nbt { spec: NbtSpec, t_wf: Pose },
    /// Critically damped approach to `goal` from an initial error state.
    /// Errors are `p − p_goal` and `Log(R_goalᵀ R)`.
    Steer {
        goal: Pose,
        e_p: Vector3<f64>,
        de_p: Vector3<f64>,
        e_r: Vector3<f64>,
        de_r: Vector3<f64>,
        /// Natural frequency [rad/s].
        omega: f64,
    },
}

fn min_jerk(u: f64, d: f64) -> (f64, f64, f64) {
    let u = u.clamp(0.0, 1.0);
    let (u2, u3) = (u * u, u * u * u);
    (
        10.0 * u3 - 15.0 * u3 * u + 6.0 * u3 * u2,
        (30.0 * u2 - 60.0 * u3 + 30.0 * u2 * u2) / d,
        (60.0 * u - 180.0 * u2 + 120.0 * u3) / (d * d),
    )
}

/// Critically damped error `(e, ė, ë)` at time `s`.
fn damped(e0: &Vector3<f64>, de0: &Vector3<f64>, omega: f64, s: f64) -> [Vector3<f64>; 3] {
    let a = *e0;
    let b = de0 + e0 * omega;
    let decay = (-omega * s).exp();
    let e = (a + b * s) * decay;
    let de = (b - (a + b * s) * omega) * decay;
    let dde = (b * (-2.0 * omega) + (a + b * s) * (omega * omega)) * decay;
    [e, de, dde]
}

impl Motion {
    /// Length of the segment; `None` for segments that last until replaced.
    pub fn duration(&self) -> Option<f64> {
        match self {
            Motion::Hold(_) | Motion::Steer { .. } => None,
            Motion::Transit { duration, .. } => Some(*duration),
            Motion::Nbt { spec, .. } => Some(spec.t_nbt),
        }
    }

    /// Starts a steering segment from the current kinematic state.
    pub fn steer_from(current: &Kinematics, goal: Pose, bandwidth_hz: f64) -> Motion {
        let r_goal = goal.rotation();
        let e_r = r_goal.inverse().mul(current.pose.rotation()).log();
        // ω = J_r(e) ė
        let de_r = so3_left_jacobian_inv(&(-e_r)) * current.angular_velocity;
        Motion::Steer {
            goal,
            e_p: current.pose.translation() - goal.translation(),
            de_p: current.velocity,
            e_r,
            de_r,
            omega: 2.0 * std::f64::consts::PI * bandwidth_hz,
        }
    }

    /// Kinematics `s` seconds after the segment started. Finite segments
    /// rest at their final pose afterwards.
    pub fn at(&self, s: f64) -> Kinematics {
        let s = s.max(0.0);
        match self {
            Motion::Hold(p) => Kinematics::at_rest(*p),
            Motion::Transit { from, to, duration } => {
                if s >= *duration {
                    return Kinematics::at_rest(*to);
                }
                let (sig, dsig, ddsig) = min_jerk(s / duration, *duration);
                let dp = to.translation() - from.translation();
                let phi = from.rotation().inverse().mul(to.rotation()).log();
                let q = from.rotation().mul(&Quat::exp(&(phi * sig)));
                Kinematics {
                    pose: Pose::new(Frame::World, Frame::Sensor, q, from.translation() + dp * sig),
                    velocity: dp * dsig,
                    acceleration: dp * ddsig,
                    angular_velocity: phi * dsig,
                }
            }
            Motion::Nbt { spec, t_wf } => {
                let k = s.min(spec.t_nbt);
                let t_fs = spec.pose(k).expect("validated trajectory");
                let m = spec.derivatives(k).expect("validated trajectory");
                let r_wf = t_wf.rotation_matrix();
                let rest = s >= spec.t_nbt;
                Kinematics {
                    pose: t_wf.compose(&t_fs).expect("frames chain"),
                    velocity: if rest { Vector3::zeros() } else { r_wf * m.velocity },
                    acceleration: if rest { Vector3::zeros() } else { r_wf * m.acceleration },
                    angular_velocity: if rest { Vector3::zeros() } else { m.angular_velocity },
                }
            }
            Motion::Steer {
                goal,
                e_p,
                de_p,
                e_r,
                de_r,
                omega,
            } => {
                let [p, v, a] = damped(e_p, de_p, *omega, s);
                let [r, dr, _] = damped(e_r, de_r, *omega, s);
                let q = goal.rotation().mul(&Quat::exp(&r));
                Kinematics {
                    pose: Pose::new(Frame::World, Frame::Sensor, q, goal.translation() + p),
                    velocity: v,
                    acceleration: a,
                    angular_velocity: so3_right_jacobian(&r) * dr,
                }
            }
        }
    }
}

/// Piecewise motion starting at time 0; before the first segment the sensor
/// rests at the initial pose.
#[derive(Debug, Clone)]
pub struct Timeline {
    segments: Vec<(f64, Motion)>,
}

impl Timeline {
    pub fn new(initial: Pose) -> Self {
        Self {
            segments: vec![(f64::NEG_INFINITY, Motion::Hold(initial))],
        }
    }

    /// Appends `motion` starting at `start`, dropping any later segments.
    pub fn push(&mut self, start: f64, motion: Motion) {
        self.segments.retain(|(s, _)| *s < start);
        self.segments.push((start, motion));
    }

    fn segment(&self, t: f64) -> &(f64, Motion) {
        let i = self.segments.partition_point(|(s, _)| *s <= t);
        &self.segments[i.saturating_sub(1)]
    }

    pub fn at(&self, t: f64) -> Kinematics {
        let (start, m) = self.segment(t);
        if start.is_finite() {
            m.at(t - start)
        } else {
            m.at(0.0)
        }
    }

    /// Time at which the last segment comes to rest (`None` while steering).
    pub fn settle_time(&self) -> Option<f64> {
        let (start, m) = self.segments.last().expect("timeline is never empty");
        match m {
            Motion::Hold(_) => Some(start.max(0.0)),
            Motion::Steer { .. } => None,
            _ => m.duration().map(|d| start + d),
        }
    }
}
