//! Closed-form GPU memory waste (bytes x seconds) of each way to handle a
//! paused request's context.
//!
//! `context` is the paused request's context in tokens, `other_context` the
//! tokens held by the other running requests. Estimates are token-granular;
//! realized waste in the engine is measured on block-granular ledger bytes.

use serde::{Deserialize, Serialize};

use crate::cost_model::CostModel;

/// Keep the context on the GPU for the whole interception.
pub fn waste_preserve(model: &CostModel, t_int: f64, context: u64) -> f64 {
    t_int * context as f64 * model.mem_per_token
}

/// Discard, then recompute the whole context in one iteration: the
/// recomputed KV idles for that iteration and every other running request
/// waits for it.
pub fn waste_discard_oneshot(model: &CostModel, context: u64, other_context: u64) -> f64 {
    let t = model.t_fwd(context as f64);
    let m = model.mem_per_token;
    t * context as f64 * m + t * other_context as f64 * m
}

/// Synchronous swap out and back in; all resident memory waits both ways.
pub fn waste_swap_naive(model: &CostModel, context: u64, batch_context: u64) -> f64 {
    2.0 * model.t_swap(context as f64) * batch_context as f64 * model.mem_per_token
}

/// Discard, then recompute in `n = ceil(context / chunk)` chunks mixed into
/// ongoing iterations.
pub fn waste_chunk_discard(model: &CostModel, context: u64, other_context: u64, chunk: u64) -> f64 {
    if context == 0 {
        return 0.0;
    }
    let chunk = chunk.max(1);
    let n = context.div_ceil(chunk) as f64;
    let c = context as f64;
    let m = model.mem_per_token;
    model.t_fwd(c) * c * m / 2.0 + n * model.t_fwd(c / n) * other_context as f64 * m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Preserve,
    Discard,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Preserve => "preserve",
            Decision::Discard => "discard",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WasteEstimate {
    pub preserve: f64,
    pub discard_oneshot: f64,
    pub swap_naive: f64,
    pub chunk_discard: f64,
    pub decision: Decision,
}

impl WasteEstimate {
    /// The smaller of preserve and chunked discard; requests are ranked by it.
    pub fn min_waste(&self) -> f64 {
        self.preserve.min(self.chunk_discard)
    }
}

/// Preserve iff its waste does not exceed chunked discard.
pub fn decide(
    model: &CostModel,
    t_int_estimate: f64,
    context: u64,
    other_context: u64,
    chunk: u64,
) -> WasteEstimate {
    let preserve = waste_preserve(model, t_int_estimate.max(0.0), context);
    let chunk_discard = waste_chunk_discard(model, context, other_context, chunk);
    WasteEstimate {
        preserve,
        discard_oneshot: waste_discard_oneshot(model, context, other_context),
        swap_naive: waste_swap_naive(model, context, other_context + context),
        chunk_discard,
        decision: if preserve <= chunk_discard {
            Decision::Preserve
        } else {
            Decision::Discard
        },
    }
}
