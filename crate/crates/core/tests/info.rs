//! Information-theoretic properties on the canonical synthetic scene.

mod common;

use common::scene::info_properties;

#[test]
fn information_never_hurts_and_repeats_are_worth_less() {
    let p = info_properties();
    let min = p.candidate_mi.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(min >= -1e-9, "min candidate MI {min}");
    for &(novel, duplicate) in &p.novel_vs_duplicate {
        assert!(duplicate >= -1e-9 && duplicate < novel, "duplicate {duplicate} novel {novel}");
    }
    for w in p.entropies.windows(2) {
        assert!(w[1] < w[0], "entropy rose: {:?}", p.entropies);
    }
}
