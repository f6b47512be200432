//! Token-selective sparse diffusion inference on a deterministic toy
//! diffusion transformer.
//!
//! The engine combines four pieces:
//!
//! * query-row sparse attention that computes only selected query rows
//!   against the full key/value set, so produced rows match dense
//!   attention exactly ([`attention`]);
//! * sum-exp-weighted token scoring with per-block output caches and an
//!   exponential staleness penalty ([`selection`]);
//! * an elitist evolutionary search over per-timestep token budgets under
//!   a total-budget band ([`search`]);
//! * an exact analytic FLOP model validated against an instrumented
//!   multiply-add counter ([`flops`]).
//!
//! [`diffusion`] ties them together in a denoising loop over a seeded toy
//! block-stack model, and [`config`]/[`metrics`]/[`verify`] provide the
//! harness surface used by the CLI.

pub mod attention;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod flops;
pub mod metrics;
pub mod numerics;
pub mod schedule;
pub mod search;
pub mod selection;
pub mod verify;

pub use attention::SelectionMask;
pub use diffusion::{ModelConfig, NoiseSchedule, RunMode, RunStats, ToyModel};
pub use error::{AstraeaError, Result};
pub use flops::FlopsReport;
pub use numerics::{Matrix, Rng};
pub use schedule::Schedule;
pub use search::{Candidate, SearchConfig};
pub use selection::{BlockCache, SelectionConfig, TokenScore};
