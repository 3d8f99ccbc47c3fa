//! Trajectory kinematics and noiseless playback through the IMU factor.

use vical::config::NbtConfig;
use vical::factors::ImuFactor;
use vical::guidance::{build_nbt_set, NbtName, NbtSpec};
use vical::imu::{preintegrate, ImuBuffer, ImuMeasurement};
use vical::sim::{CameraFrame, Motion, RigSpec, SimOptions, Simulator};
use vical::target::TargetSpec;

pub fn specs() -> Vec<NbtSpec> {
    build_nbt_set(&TargetSpec::default(), &NbtConfig::default())
}

/// Largest speed at the trajectory ends, analytic and by one-sided differences.
pub fn endpoint_speeds() -> (f64, f64) {
    let (mut analytic, mut numeric) = (0.0f64, 0.0f64);
    // the one-sided difference carries ½·a·h from the nonzero end acceleration
    let h = 1e-7;
    for s in specs() {
        for k in [0.0, s.t_nbt] {
            let m = s.derivatives(k).unwrap();
            analytic = analytic.max(m.velocity.norm()).max(m.angular_velocity.norm());
        }
        let v0 = (s.pose(h).unwrap().translation() - s.pose(0.0).unwrap().translation()) / h;
        let v1 = (s.pose(s.t_nbt).unwrap().translation() - s.pose(s.t_nbt - h).unwrap().translation()) / h;
        let w0 = s.pose(h).unwrap().rotation().angle_to(s.pose(0.0).unwrap().rotation()) / h;
        let w1 = s.pose(s.t_nbt).unwrap().rotation().angle_to(s.pose(s.t_nbt - h).unwrap().rotation()) / h;
        numeric = numeric.max(v0.norm()).max(v1.norm()).max(w0).max(w1);
    }
    (analytic, numeric)
}

/// Long over short axis of the vertical and horizontal figure-eights.
pub fn figure_eight_ratios() -> (f64, f64) {
    let s = specs();
    let v = s.iter().find(|n| n.name == NbtName::VertFig8).unwrap();
    let h = s.iter().find(|n| n.name == NbtName::HorizFig8).unwrap();
    (v.a / v.b, h.b / h.a)
}

pub fn nbt_run(seed: u64) -> (Simulator, Vec<CameraFrame>, Vec<ImuMeasurement>) {
    let rig = RigSpec::default_stereo();
    let spec = build_nbt_set(&rig.target, &NbtConfig::default())[0];
    let t_fs0 = spec.pose(0.0).unwrap();
    let start = rig.fiducial.compose(&t_fs0).unwrap();
    let mut sim = Simulator::new(rig.clone(), start, SimOptions { imu_noise: false, ..Default::default() }, seed);
    sim.timeline.push(0.0, Motion::Nbt { spec, t_wf: rig.fiducial });
    let (frames, imu) = sim.step(spec.t_nbt + 0.5);
    (sim, frames, imu)
}

fn sim_end(sim: &Simulator) -> f64 {
    build_nbt_set(&sim.rig().target, &NbtConfig::default())[0].t_nbt
}

pub struct ResidualCheck {
    pub worst: f64,
    pub checked: usize,
    pub intervals: usize,
}

/// IMU factor residual of noiseless playback against the true states.
pub fn noiseless_nbt_residual(seed: u64) -> ResidualCheck {
    let (sim, frames, imu) = nbt_run(seed);
    let rig = sim.rig().clone();
    let buf = ImuBuffer::new(imu).unwrap();
    let mut worst: f64 = 0.0;
    // acceleration steps where the trajectory starts and stops; intervals whose
    // interpolation support reaches across a step cannot be integrated exactly
    let margin = 10_000_000;
    let end_ns = (sim_end(&sim) * 1e9) as i64 - margin;
    let mut checked = 0;
    for w in frames.windows(2).filter(|w| w[0].stamp_ns >= margin && w[1].stamp_ns <= end_ns) {
        let (a, b) = (w[0].stamp_ns, w[1].stamp_ns);
        checked += 1;
        let s0 = sim.true_state(a);
        let s1 = sim.true_state(b);
        let pre = preintegrate(&buf, &s0.bias(), &rig.imu, a, b, rig.time_delay).unwrap();
        worst = worst.max(ImuFactor::raw_residual(&pre, &s0, &s1).norm());
    }
    let intervals = (sim_end(&sim) * rig.camera_rate).round() as usize;
    ResidualCheck {
        worst,
        checked,
        intervals,
    }
}
