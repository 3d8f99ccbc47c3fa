//! Canonical synthetic camera scene for information properties: the default
//! stereo rig at its true calibration, viewing the target from grid views
//! with noiseless detections.

use vical::calib::CameraGraph;
use vical::config::SessionConfig;
use vical::guidance::{build_nbv_grid, NbvCandidate};
use vical::info::{marginal_entropy, score_against};
use vical::session::simulate_view;
use vical::sim::RigSpec;
use vical::solver::marginal_information;

/// Views added one after another, in this order.
pub const SEQUENCE: [usize; 8] = [62, 2, 134, 16, 101, 48, 88, 23];

pub struct InfoProperties {
    /// Entropy after each view of [`SEQUENCE`] [nats].
    pub entropies: Vec<f64>,
    /// MI of every grid candidate against the full sequence.
    pub candidate_mi: Vec<f64>,
    /// Per view of [`SEQUENCE`]: its MI while still unseen, then its MI as a
    /// duplicate right after it was added.
    pub novel_vs_duplicate: Vec<(f64, f64)>,
}

pub fn info_properties() -> InfoProperties {
    let rig = RigSpec::default_stereo();
    let cfg = SessionConfig::default();
    let grid: Vec<NbvCandidate> = build_nbv_grid(&rig.target, &cfg.nbv);
    let mut g = CameraGraph::new(&rig.target, &rig.cameras, &rig.extrinsics, cfg.pixel_sigma, cfg.cauchy_scale);
    g.add_priors(&cfg.priors).unwrap();
    let view = |id: usize| {
        let pose = grid[id].pose;
        (pose, simulate_view(&rig.target, &rig.cameras, &rig.extrinsics, &pose))
    };
    let score = |g: &CameraGraph, id: usize| {
        let (pose, obs) = view(id);
        let baseline = marginal_information(&g.problem, &g.theta()).unwrap();
        score_against(&baseline, &g.problem, &g.theta(), id, |p| g.add_view_to(p, &pose, &obs).map(|_| ()))
            .unwrap()
            .mutual_info
    };
    let mut entropies = Vec::new();
    let mut novel_vs_duplicate = Vec::new();
    for id in SEQUENCE {
        let novel = score(&g, id);
        let (pose, obs) = view(id);
        g.add_view(&pose, &obs).unwrap();
        entropies.push(marginal_entropy(&marginal_information(&g.problem, &g.theta()).unwrap()));
        novel_vs_duplicate.push((novel, score(&g, id)));
    }
    InfoProperties {
        entropies,
        candidate_mi: (0..grid.len()).map(|id| score(&g, id)).collect(),
        novel_vs_duplicate,
    }
}
