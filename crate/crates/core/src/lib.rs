//! Discrete-event simulation of an LLM inference engine serving requests that
//! pause mid-generation for tool calls, environment steps, or human replies.
//!
//! The crate models what happens to a paused request's KV cache (preserve it
//! on the GPU, discard and recompute it, or swap it to host memory), charges
//! each choice in GPU memory x time, and compares scheduling policies built
//! from those choices over synthetic or replayed traces.
//!
//! Module map:
//!
//! - [`workload`]: interception classes, trace synthesis, trace files.
//! - [`cost_model`]: iteration latency, swap latency, KV footprint, profile fit.
//! - [`memory`]: the GPU/CPU KV ledger.
//! - [`waste`]: closed-form waste estimates used by the scheduler.
//! - [`policy`]: policy kinds, swap budget, dispositions, batch formation.
//! - [`engine`]: the iteration-level simulation loop.
//! - [`metrics`]: latency/throughput/TTFT and realized waste reports.
//! - [`experiment`]: rate sweeps and the technique ladder.

pub mod cost_model;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod memory;
pub mod metrics;
pub mod policy;
pub mod waste;
pub mod workload;

pub use cost_model::{CostModel, ProfileFit};
pub use engine::{run, IterationRecord, SimConfig, SimOutput, Simulator};
pub use error::{Error, Result};
pub use memory::{KvLedger, MemoryError};
pub use metrics::MetricsLedger;
pub use policy::{EstimatorMode, PolicyKind, Techniques};
pub use workload::{ClassName, InterceptionClass, Request};

/// Request identifier, unique within a trace.
pub type RequestId = u64;
