//! Next-best-view and next-best-trajectory guidance.

pub mod init;
pub mod nbt;
pub mod nbv;

use serde::{Deserialize, Serialize};

pub use init::{initialize_fiducial_pose, solve_pnp, InitError};
pub use nbt::{build_nbt_set, NbtError, NbtMotion, NbtName, NbtSpec};
pub use nbv::{build_nbv_grid, visible_fraction, NbvCandidate, Tilt};

/// Session pipeline mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SessionMode {
    Initializing,
    LiveCapture,
    FindNbv,
    GuidingNbv,
    GuidingNbt,
    FinalBatch,
    Done,
}

impl SessionMode {
    /// Whether the pipelines allow moving from `self` to `next`.
    pub fn can_transition(self, next: SessionMode) -> bool {
        use SessionMode::*;
        matches!(
            (self, next),
            (Initializing, LiveCapture)
                | (Initializing, GuidingNbt)
                | (Initializing, FinalBatch)
                | (LiveCapture, FindNbv)
                | (FindNbv, GuidingNbv)
                | (FindNbv, FinalBatch)
                | (GuidingNbv, LiveCapture)
                | (GuidingNbv, FindNbv)
                | (GuidingNbt, GuidingNbt)
                | (GuidingNbt, FinalBatch)
                // camera stage done, camera-IMU stage starts
                | (FinalBatch, Initializing)
                | (FinalBatch, Done)
        )
    }
}

/// Calibration stage a mode belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Camera,
    CameraImu,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn final_batch_precedes_done() {
        use SessionMode::*;
        let all = [Initializing, LiveCapture, FindNbv, GuidingNbv, GuidingNbt, FinalBatch, Done];
        for m in all {
            assert_eq!(m.can_transition(Done), m == FinalBatch);
        }
        assert!(!Done.can_transition(Initializing));
    }
}
