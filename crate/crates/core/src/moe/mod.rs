//! One MoE layer: gate, expert FFNs, and the three forward schedules.

mod expert;
mod gate;
mod schedule;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{MoeConfig, ParallelLayout};

pub use expert::{expert_shard_forward, ExpertWeights};
pub use gate::{combine, gate, CapacityPolicy, GateOutput, Route};
pub use schedule::{
    check_layout, max_relative_error, reference_forward, run_schedule, ReferenceOutput, ScheduleKind, ScheduleRun,
};

/// One `(B*L, M)` input per MP group, uniform in `[-1, 1)`.
pub fn random_inputs(cfg: &MoeConfig, layout: &ParallelLayout, seed: u64) -> Vec<Array2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..layout.world() / layout.mp())
        .map(|_| Array2::from_shape_fn((cfg.tokens(), cfg.embed), |_| rng.gen_range(-1.0..1.0)))
        .collect()
}
