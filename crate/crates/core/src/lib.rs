//! Schedules, collectives, timing simulation and an alpha-beta cost model for
//! mixture-of-experts layers trained with model, expert and expert-sharding
//! parallelism.

pub mod collectives;
pub mod config;
pub mod cost;
pub mod error;
pub mod moe;
pub mod sweep;
pub mod timing;

pub use collectives::{Buffer, CommKind, CommRecord, CommTrace, WorldState};
pub use config::{
    classify_placement, derive_capacity, ClusterSpec, GroupKind, MoeConfig, ParallelLayout, PlacementCase, RunConfig,
    Volumes,
};
pub use cost::{AlphaBeta, CostMode, CostProfile, CostReport, Sample};
pub use error::{Error, Result};
pub use moe::{ExpertWeights, ScheduleKind};
pub use sweep::SweepGrid;
pub use timing::{CollectiveKey, TimingReport};
