//! Shared fixtures for the criterion benches.

use hybridmoe_core::WorldState;

/// `p` ranks holding `len` elements each, filled with a deterministic ramp.
pub fn ramp_world(p: usize, len: usize) -> WorldState {
    WorldState::from_flat(
        (0..p)
            .map(|r| (0..len).map(|i| (r * len + i) as f64 * 0.5).collect())
            .collect(),
    )
}
