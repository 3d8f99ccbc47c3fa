//! Scripted sessions: a list of motion steps played through the simulator.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{Dataset, Motion, RigSpec, SimOptions, Simulator};
use crate::config::NbtConfig;
use crate::geometry::{look_at, Frame, Pose};
use crate::guidance::{build_nbt_set, NbtName};

/// One step of a motion script. Positions are in the target frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScriptStep {
    Hold {
        duration: f64,
    },
    /// Minimum-jerk move of the reference camera to `eye`, looking at
    /// `look_at` (the target centre by default).
    MoveTo {
        eye: [f64; 3],
        #[serde(default)]
        look_at: Option<[f64; 3]>,
        duration: f64,
    },
    /// Minimum-jerk translation without rotation.
    Translate {
        offset: [f64; 3],
        duration: f64,
    },
    Nbt {
        name: NbtName,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    pub steps: Vec<ScriptStep>,
}

/// Length of the static recording produced by an empty script [s].
pub const EMPTY_SCRIPT_HOLD: f64 = 2.0;

impl Script {
    /// Plays the script from the rig's start pose and records everything.
    pub fn run(&self, rig: &RigSpec, nbt: &NbtConfig, opts: SimOptions, seed: u64) -> Dataset {
        let start = rig.start_pose();
        let mut sim = Simulator::new(rig.clone(), start, opts, seed);
        let specs = build_nbt_set(&rig.target, nbt);
        let mut t = 0.0;
        let mut pose = start;
        let mut timeline = sim.timeline.clone();
        let steps = if self.steps.is_empty() {
            vec![ScriptStep::Hold {
                duration: EMPTY_SCRIPT_HOLD,
            }]
        } else {
            self.steps.clone()
        };
        for step in &steps {
            let (motion, duration, end) = match step {
                ScriptStep::Hold { duration } => (Motion::Hold(pose), *duration, pose),
                ScriptStep::MoveTo { eye, look_at: at, duration } => {
                    let eye = Vector3::from(*eye);
                    let at = at.map_or(rig.target.center(), Vector3::from);
                    let r = look_at(&eye, &at, &Vector3::y());
                    let to = rig.sensor_pose_for_camera(&Pose::from_matrix(Frame::Fiducial, Frame::Camera(0), &r, eye));
                    let m = Motion::Transit {
                        from: pose,
                        to,
                        duration: *duration,
                    };
                    (m, *duration, to)
                }
                ScriptStep::Translate { offset, duration } => {
                    let shift = rig.fiducial.rotation().rotate(&Vector3::from(*offset));
                    let to = Pose::new(Frame::World, Frame::Sensor, *pose.rotation(), pose.translation() + shift);
                    let m = Motion::Transit {
                        from: pose,
                        to,
                        duration: *duration,
                    };
                    (m, *duration, to)
                }
                ScriptStep::Nbt { name } => {
                    let spec = *specs.iter().find(|s| s.name == *name).expect("all names are built");
                    let first = rig.fiducial.compose(&spec.pose(0.0).expect("valid start")).expect("frames chain");
                    let last = rig
                        .fiducial
                        .compose(&spec.pose(spec.t_nbt).expect("valid end"))
                        .expect("frames chain");
                    // get to the start first
                    let approach = 2.0;
                    timeline.push(
                        t,
                        Motion::Transit {
                            from: pose,
                            to: first,
                            duration: approach,
                        },
                    );
                    t += approach;
                    let m = Motion::Nbt {
                        spec,
                        t_wf: rig.fiducial,
                    };
                    (m, spec.t_nbt, last)
                }
            };
            timeline.push(t, motion);
            t += duration;
            pose = end;
        }
        timeline.push(t, Motion::Hold(pose));
        sim.timeline = timeline;
        let (frames, imu) = sim.advance_to((t * 1e9).round() as i64);
        let mut ds = Dataset::from_frames(rig.cameras.len(), &frames, imu);
        ds.truth = Some(rig.clone());
        ds
    }
}
