//! Dynamic exponential-moving-average (EMA) weighting for continual learning.
//!
//! The crate is split along the lifecycle of a continual run:
//!
//! - [`params`]: flat parameter storage with named layer segments.
//! - [`ema`]: the EMA weight rules (closed-form scalar and layer-wise L1
//!   approximation) and the per-iteration EMA state machine.
//! - [`net`]: a small fully-connected classifier with manual backprop.
//! - [`tasks`]: deterministic synthetic task sequences.
//! - [`trainer`]: the continual training loop and evaluation sweep.
//! - [`metrics`]: Avg.ACC, Forgetting, New.ACC, ADA and ADF over an accuracy matrix.

pub mod ema;
mod error;
pub mod metrics;
pub mod net;
pub mod params;
pub mod seed;
pub mod tasks;
pub mod trainer;

pub use ema::{BetaMode, BetaRecord, BetaReduction, BetaTrace, EmaState};
pub use error::{Error, Result};
pub use metrics::{AccuracyMatrix, MetricsReport, Unit};
pub use net::{Activation, Model, NetSpec};
pub use params::{LayerView, ParamVector, Segment};
pub use tasks::{Sample, TaskConfig, TaskKind, TaskSequence};
pub use trainer::{EvalTarget, Policy, RunArtifacts, RunConfig};
