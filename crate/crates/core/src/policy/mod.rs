//! Interception-handling policies and per-iteration batch formation.
//!
//! Every policy is a point in a small technique space ([`Techniques`]): how a
//! resumed request re-enters the waiting queue, whether recomputation is
//! chunked, how (or whether) contexts are swapped, and what happens to the
//! part of a paused context that is not swapped.

pub mod budget;
pub mod state;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cost_model::CostModel;
use crate::waste::{self, Decision};
use crate::workload::ClassName;
use crate::RequestId;

pub use budget::{allocate_swap_budget, compute_swap_limit, SwapBudget};
pub use state::{Phase, QueueKey, ReqRuntime, SchedState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PolicyKind {
    #[serde(rename = "vanilla-discard")]
    VanillaDiscard,
    #[serde(rename = "improved-discard")]
    ImprovedDiscard,
    #[serde(rename = "preserve")]
    Preserve,
    #[serde(rename = "swap")]
    NaiveSwap,
    #[serde(rename = "infercept")]
    InferCept,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::VanillaDiscard,
        PolicyKind::ImprovedDiscard,
        PolicyKind::Preserve,
        PolicyKind::NaiveSwap,
        PolicyKind::InferCept,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::VanillaDiscard => "vanilla-discard",
            PolicyKind::ImprovedDiscard => "improved-discard",
            PolicyKind::Preserve => "preserve",
            PolicyKind::NaiveSwap => "swap",
            PolicyKind::InferCept => "infercept",
        }
    }

    pub fn techniques(self) -> Techniques {
        let base = Techniques {
            resume_keeps_arrival: true,
            chunked: false,
            swap: SwapMode::None,
            keep: KeepMode::DiscardAll,
        };
        match self {
            PolicyKind::VanillaDiscard => Techniques {
                resume_keeps_arrival: false,
                ..base
            },
            PolicyKind::ImprovedDiscard => base,
            PolicyKind::Preserve => Techniques {
                keep: KeepMode::PreserveAll,
                ..base
            },
            PolicyKind::NaiveSwap => Techniques {
                swap: SwapMode::Naive,
                ..base
            },
            PolicyKind::InferCept => Techniques {
                chunked: true,
                swap: SwapMode::Budgeted,
                keep: KeepMode::MinWaste,
                ..base
            },
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown policy `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorMode {
    #[default]
    Oracle,
    Profiled,
    Dynamic,
}

impl EstimatorMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorMode::Oracle => "oracle",
            EstimatorMode::Profiled => "profiled",
            EstimatorMode::Dynamic => "dynamic",
        }
    }
}

impl fmt::Display for EstimatorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "oracle" => Ok(EstimatorMode::Oracle),
            "profiled" => Ok(EstimatorMode::Profiled),
            "dynamic" => Ok(EstimatorMode::Dynamic),
            _ => Err(format!("unknown duration estimator `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SwapMode {
    None,
    /// Whole contexts, synchronously, stalling the iteration.
    Naive,
    /// Bounded per iteration so transfers hide behind forwarding.
    Budgeted,
}

/// What happens to the part of a paused context that is not swapped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KeepMode {
    DiscardAll,
    PreserveAll,
    /// Preserve short automated calls, discard human-facing ones.
    Interactive,
    /// Per-request argmin of preserve vs chunked-discard waste.
    MinWaste,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Techniques {
    /// Resumed requests queue by original arrival instead of resume time.
    pub resume_keeps_arrival: bool,
    /// Prefill and recompute in chunks that keep the batch at the knee.
    pub chunked: bool,
    pub swap: SwapMode,
    pub keep: KeepMode,
}

impl Techniques {
    /// Cumulative technique ladder from vanilla discard to the full scheduler.
    pub fn ladder() -> Vec<(&'static str, Techniques)> {
        let improved = PolicyKind::ImprovedDiscard.techniques();
        let chunked = Techniques {
            chunked: true,
            ..improved
        };
        let swap = Techniques {
            swap: SwapMode::Budgeted,
            ..chunked
        };
        let heuristic = Techniques {
            keep: KeepMode::Interactive,
            ..swap
        };
        vec![
            ("vanilla-discard", PolicyKind::VanillaDiscard.techniques()),
            ("improved-discard", improved),
            ("chunked-recompute", chunked),
            ("budgeted-swap", swap),
            ("preserve-heuristic", heuristic),
            ("min-waste", PolicyKind::InferCept.techniques()),
        ]
    }
}

/// Disposition of one paused request's context.
#[derive(Debug, Clone, Serialize)]
pub struct PausedRecord {
    pub request_id: RequestId,
    pub kind: ClassName,
    pub t_call: f64,
    pub end_time: f64,
    pub duration_known: Option<f64>,
    pub estimate: f64,
    pub context: u64,
    pub preserved_tokens: u64,
    pub swapped_tokens: u64,
    pub discarded_tokens: u64,
    pub original_arrival: f64,
    /// Row in the decision log.
    pub decision_index: usize,
}

/// One row of the per-interception decision log.
#[derive(Debug, Clone, Serialize)]
pub struct DecisionRecord {
    pub id: RequestId,
    pub interception: usize,
    pub t_call: f64,
    pub context: u64,
    pub estimate: f64,
    pub waste_preserve: f64,
    pub waste_chunkd: f64,
    pub decision: &'static str,
    pub swapped: u64,
    pub preserved: u64,
    pub discarded: u64,
}

pub fn estimate_duration(
    record: &PausedRecord,
    now: f64,
    mode: EstimatorMode,
    profiled: &BTreeMap<ClassName, f64>,
) -> f64 {
    let est = match mode {
        EstimatorMode::Oracle => record.duration_known.unwrap_or(0.0),
        EstimatorMode::Profiled => profiled.get(&record.kind).copied().unwrap_or(0.0),
        EstimatorMode::Dynamic => now - record.t_call,
    };
    est.max(0.0)
}

/// Class means from the built-in interception table.
pub fn builtin_profiled_durations() -> BTreeMap<ClassName, f64> {
    ClassName::ALL
        .into_iter()
        .map(|c| (c, crate::workload::InterceptionClass::builtin(c).duration_mean))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChunkAssignment {
    pub id: RequestId,
    pub tokens: u64,
    /// Of `tokens`, how many rebuild discarded context.
    pub recompute: u64,
}

/// One iteration's composition.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BatchState {
    pub decode_ids: Vec<RequestId>,
    pub chunk_assignments: Vec<ChunkAssignment>,
    pub swap_in_assignments: Vec<(RequestId, u64)>,
    pub swap_out_assignments: Vec<(RequestId, u64)>,
    pub evicted: Vec<RequestId>,
    pub total_query_tokens: u64,
    pub stall: f64,
    pub swap_limit: u64,
}

impl BatchState {
    pub fn recompute_tokens(&self) -> u64 {
        self.chunk_assignments.iter().map(|c| c.recompute).sum()
    }

    pub fn swapped_in(&self) -> u64 {
        self.swap_in_assignments.iter().map(|a| a.1).sum()
    }

    pub fn swapped_out(&self) -> u64 {
        self.swap_out_assignments.iter().map(|a| a.1).sum()
    }

    /// Nothing computed, moved, or stalled.
    pub fn is_empty(&self) -> bool {
        self.total_query_tokens == 0
            && self.swap_in_assignments.is_empty()
            && self.swap_out_assignments.is_empty()
            && self.evicted.is_empty()
            && self.stall == 0.0
    }
}

/// Scheduler driven by the engine once per iteration.
#[derive(Debug, Clone)]
pub struct Policy {
    pub techniques: Techniques,
    pub estimator: EstimatorMode,
    pub profiled: BTreeMap<ClassName, f64>,
    /// Per-iteration prefill cap when chunking is off; the first admitted
    /// request is exempt so oversized contexts still make progress.
    pub max_batched_tokens: u64,
}

/// Iteration-start inputs shared by the scheduling steps.
#[derive(Debug, Clone, Copy)]
pub struct IterationPlan {
    pub now: f64,
    pub decode_count: u64,
    pub budget: SwapBudget,
}

impl Policy {
    fn chunk_size(model: &CostModel, decode_count: u64) -> u64 {
        model.saturation_point.saturating_sub(decode_count).max(1)
    }

    /// Tokens of GPU context held by running requests.
    fn other_context(st: &SchedState, model: &CostModel) -> u64 {
        (st.running_gpu_bytes() / model.mem_per_token).round() as u64
    }

    /// Decides what happens to every request intercepted since the last
    /// iteration. Returns swap-out assignments and synchronous stall.
    pub fn on_interceptions(
        &self,
        st: &mut SchedState,
        model: &CostModel,
        plan: &IterationPlan,
        decisions: &mut Vec<DecisionRecord>,
    ) -> (Vec<(RequestId, u64)>, f64) {
        let ids = std::mem::take(&mut st.intercepted);
        if ids.is_empty() {
            return (Vec::new(), 0.0);
        }
        let other = Self::other_context(st, model);
        let chunk = Self::chunk_size(model, plan.decode_count);

        let mut pending: Vec<(PausedRecord, waste::WasteEstimate, usize)> = ids
            .iter()
            .map(|&id| {
                let r = st.req(id);
                let int = r
                    .current_interception()
                    .expect("intercepted request has an interception")
                    .clone();
                let context = st.ledger.entry(id).gpu_tokens;
                let mut record = PausedRecord {
                    request_id: id,
                    kind: int.kind,
                    t_call: plan.now,
                    end_time: plan.now + int.duration,
                    duration_known: Some(int.duration),
                    estimate: 0.0,
                    context,
                    preserved_tokens: 0,
                    swapped_tokens: 0,
                    discarded_tokens: 0,
                    original_arrival: r.arrival(),
                    decision_index: 0,
                };
                record.estimate = estimate_duration(&record, plan.now, self.estimator, &self.profiled);
                let est = waste::decide(model, record.estimate, context, other, chunk);
                (record, est, r.seg_idx)
            })
            .collect();
        if self.techniques.keep == KeepMode::MinWaste {
            pending.sort_by(|a, b| b.1.min_waste().total_cmp(&a.1.min_waste()));
        }

        let mut out_left = plan.budget.alloc_out;
        let mut swaps = Vec::new();
        let mut stall = 0.0;
        for (mut record, est, seg_idx) in pending {
            let id = record.request_id;
            let context = record.context;
            let swapped = match self.techniques.swap {
                SwapMode::None => 0,
                SwapMode::Budgeted => {
                    let take = out_left.min(context).min(st.ledger.cpu_free_tokens());
                    if take > 0 && st.ledger.swap_out(id, take).is_ok() {
                        out_left -= take;
                        take
                    } else {
                        0
                    }
                }
                SwapMode::Naive => {
                    if context > 0 && st.ledger.swap_out(id, context).is_ok() {
                        stall += model.t_swap(context as f64) + model.swap_launch_overhead;
                        context
                    } else {
                        0
                    }
                }
            };
            if swapped > 0 {
                swaps.push((id, swapped));
            }
            let remainder = context - swapped;
            let keep = match self.techniques.keep {
                KeepMode::DiscardAll => false,
                KeepMode::PreserveAll => true,
                KeepMode::Interactive => !record.kind.is_interactive(),
                KeepMode::MinWaste => est.decision == Decision::Preserve,
            };
            if keep {
                record.preserved_tokens = remainder;
            } else {
                st.ledger
                    .discard(id, remainder)
                    .expect("remainder is resident on the GPU");
                record.discarded_tokens = remainder;
            }
            record.swapped_tokens = swapped;
            record.decision_index = decisions.len();
            decisions.push(DecisionRecord {
                id,
                interception: seg_idx,
                t_call: record.t_call,
                context,
                estimate: record.estimate,
                waste_preserve: est.preserve,
                waste_chunkd: est.chunk_discard,
                decision: if keep { "preserve" } else { "discard" },
                swapped,
                preserved: record.preserved_tokens,
                discarded: record.discarded_tokens,
            });
            st.pause(record);
        }
        (swaps, stall)
    }

    /// Re-runs the waste decision for preserved contexts with the elapsed
    /// pause as the duration estimate; a flip to discard frees the context.
    /// Returns the ids whose context was discarded.
    pub fn reevaluate_paused(
        &self,
        st: &mut SchedState,
        model: &CostModel,
        plan: &IterationPlan,
        decisions: &mut [DecisionRecord],
    ) -> Vec<RequestId> {
        if self.estimator != EstimatorMode::Dynamic || self.techniques.keep != KeepMode::MinWaste {
            return Vec::new();
        }
        let other = Self::other_context(st, model);
        let chunk = Self::chunk_size(model, plan.decode_count);
        let mut flipped = Vec::new();
        for (&id, record) in st.paused.iter_mut() {
            if record.preserved_tokens == 0 {
                continue;
            }
            let estimate = estimate_duration(record, plan.now, self.estimator, &self.profiled);
            record.estimate = estimate;
            let est = waste::decide(model, estimate, record.preserved_tokens, other, chunk);
            if est.decision == Decision::Discard {
                st.ledger
                    .discard(id, record.preserved_tokens)
                    .expect("preserved tokens are resident on the GPU");
                record.discarded_tokens += record.preserved_tokens;
                record.preserved_tokens = 0;
                let row = &mut decisions[record.decision_index];
                row.decision = "discard";
                row.estimate = estimate;
                row.waste_preserve = est.preserve;
                row.waste_chunkd = est.chunk_discard;
                row.preserved = 0;
                row.discarded = record.discarded_tokens;
                flipped.push(id);
            }
        }
        flipped
    }

    /// Moves a request whose interception ended back into scheduling.
    pub fn on_resume(&self, st: &mut SchedState, id: RequestId, now: f64) {
        let r = st.req_mut(id);
        let ret = r
            .current_interception()
            .map_or(0, |i| u64::from(i.return_tokens));
        r.seg_idx += 1;
        r.decoded_in_seg = 0;
        r.pending_prefill += ret;
        if !self.techniques.resume_keeps_arrival {
            r.queue_key = now;
        }
        let e = st.ledger.entry(id);
        let phase = if e.cpu_tokens > 0 {
            Phase::SwapQueue
        } else if e.discarded_tokens > 0 {
            Phase::Waiting
        } else {
            Phase::Running
        };
        st.enter(id, phase);
    }

    /// Latest-arriving evictable request, excluding those already holding a
    /// decode slot this iteration. Candidates are running requests and
    /// waiting or swap-queue requests holding GPU memory. `requester` is
    /// always a candidate.
    fn pick_victim(st: &SchedState, protected: &BTreeSet<RequestId>, requester: RequestId) -> RequestId {
        let running = st
            .running
            .iter()
            .filter(|k| !protected.contains(&k.1) && (k.1 == requester || st.ledger.entry(k.1).gpu_tokens > 0))
            .map(|k| QueueKey(k.0, k.1));
        let holding = st
            .waiting
            .iter()
            .chain(&st.swap_queue)
            .filter(|k| !protected.contains(&k.1) && st.ledger.entry(k.1).gpu_tokens > 0)
            .map(|k| QueueKey(st.req(k.1).arrival(), k.1));
        running
            .chain(holding)
            .max()
            .map_or(requester, |k| k.1)
    }

    /// Frees GPU memory for `id` to grow by `tokens`, evicting by the victim
    /// rule. Returns false if `id` itself was evicted.
    fn make_room(
        st: &mut SchedState,
        protected: &BTreeSet<RequestId>,
        id: RequestId,
        tokens: u64,
        evicted: &mut Vec<RequestId>,
    ) -> bool {
        while st.ledger.gpu_blocks_needed(id, tokens) > st.ledger.gpu_free_blocks() {
            let victim = Self::pick_victim(st, protected, id);
            st.evict(victim);
            evicted.push(victim);
            if victim == id {
                return false;
            }
        }
        true
    }

    /// Computes `tokens` of `id`'s pending work: discarded context first,
    /// then prompt or return tokens. Returns the recompute share.
    fn commit(st: &mut SchedState, id: RequestId, tokens: u64) -> u64 {
        let discarded = st.ledger.entry(id).discarded_tokens;
        let recompute = tokens.min(discarded);
        let fresh = tokens - recompute;
        st.ledger
            .recompute_commit(id, recompute)
            .expect("caller checked GPU room");
        st.ledger.allocate(id, fresh).expect("caller checked GPU room");
        st.req_mut(id).pending_prefill -= fresh;
        recompute
    }

    fn swap_in_from_queue(
        st: &mut SchedState,
        mut allowance: u64,
        assignments: &mut Vec<(RequestId, u64)>,
    ) -> u64 {
        let mut moved = 0;
        for id in st.swap_order() {
            if allowance == 0 {
                break;
            }
            let cpu = st.ledger.entry(id).cpu_tokens;
            let take = cpu.min(allowance).min(st.ledger.gpu_headroom(id));
            if take == 0 {
                break;
            }
            st.ledger.swap_in(id, take).expect("bounded by GPU headroom");
            allowance -= take;
            moved += take;
            match assignments.iter_mut().find(|a| a.0 == id) {
                Some(a) => a.1 += take,
                None => assignments.push((id, take)),
            }
            if take == cpu {
                st.enter(id, Phase::Running);
            }
        }
        moved
    }

    /// Builds the iteration's batch: reserves decode slots, swaps in, and
    /// assigns prefill and recompute chunks.
    pub fn form_batch(
        &self,
        st: &mut SchedState,
        model: &CostModel,
        plan: &IterationPlan,
        decode: &[RequestId],
        swap_outs: Vec<(RequestId, u64)>,
        stall: f64,
    ) -> BatchState {
        let mut batch = BatchState {
            swap_out_assignments: swap_outs,
            stall,
            ..BatchState::default()
        };
        let mut protected = BTreeSet::new();

        for &id in decode {
            if st.req(id).phase != Phase::Running {
                continue;
            }
            if Self::make_room(st, &protected, id, 1, &mut batch.evicted) {
                st.ledger.allocate(id, 1).expect("room was made");
                protected.insert(id);
                batch.decode_ids.push(id);
            }
        }

        match self.techniques.swap {
            SwapMode::None => {}
            SwapMode::Budgeted => {
                Self::swap_in_from_queue(st, plan.budget.alloc_in, &mut batch.swap_in_assignments);
            }
            SwapMode::Naive => {
                for id in st.swap_order() {
                    let cpu = st.ledger.entry(id).cpu_tokens;
                    if st.ledger.swap_in(id, cpu).is_err() {
                        break;
                    }
                    batch.stall += model.t_swap(cpu as f64) + model.swap_launch_overhead;
                    batch.swap_in_assignments.push((id, cpu));
                    st.enter(id, Phase::Running);
                }
            }
        }
        protected.extend(batch.swap_in_assignments.iter().map(|a| a.0));

        let decode_tokens = batch.decode_ids.len() as u64;
        if self.techniques.chunked {
            self.assign_chunks(st, model, &mut protected, decode_tokens, &mut batch);
        } else {
            self.assign_whole(st, &protected, decode_tokens, &mut batch);
        }
        batch.total_query_tokens =
            decode_tokens + batch.chunk_assignments.iter().map(|c| c.tokens).sum::<u64>();

        let limit = compute_swap_limit(model, batch.total_query_tokens);
        batch.swap_limit = limit;
        if self.techniques.swap == SwapMode::Budgeted {
            let used = batch.swapped_in() + batch.swapped_out();
            Self::swap_in_from_queue(st, limit.saturating_sub(used), &mut batch.swap_in_assignments);
        }
        batch
    }

    /// In-progress requests first, then fresh waiting requests in queue
    /// order, within a token budget that keeps the batch at the knee. An
    /// in-progress request with no GPU headroom evicts by the victim rule.
    fn assign_chunks(
        &self,
        st: &mut SchedState,
        model: &CostModel,
        protected: &mut BTreeSet<RequestId>,
        decode_tokens: u64,
        batch: &mut BatchState,
    ) {
        let mut budget = Self::chunk_size(model, decode_tokens);
        let in_progress: Vec<RequestId> = st
            .running
            .iter()
            .map(|k| k.1)
            .filter(|&id| st.pending_work(id) > 0)
            .chain(
                st.waiting
                    .iter()
                    .map(|k| k.1)
                    .filter(|&id| st.ledger.entry(id).gpu_tokens > 0),
            )
            .collect();
        for id in in_progress {
            if budget == 0 {
                break;
            }
            if st.req(id).phase == Phase::Waiting && st.ledger.entry(id).gpu_tokens == 0 {
                // Evicted earlier in this loop.
                continue;
            }
            if st.ledger.gpu_headroom(id) == 0 && !Self::make_room(st, protected, id, 1, &mut batch.evicted) {
                continue;
            }
            let take = st.pending_work(id).min(budget).min(st.ledger.gpu_headroom(id));
            if take == 0 {
                continue;
            }
            let recompute = Self::commit(st, id, take);
            budget -= take;
            protected.insert(id);
            batch.chunk_assignments.push(ChunkAssignment { id, tokens: take, recompute });
            if st.pending_work(id) == 0 && st.req(id).phase == Phase::Waiting {
                st.enter(id, Phase::Running);
            }
        }

        // Blocks still owed to partially computed requests.
        let mut owed: u64 = st
            .running
            .iter()
            .map(|k| k.1)
            .chain(
                st.waiting
                    .iter()
                    .map(|k| k.1)
                    .filter(|&id| st.ledger.entry(id).gpu_tokens > 0),
            )
            .map(|id| st.ledger.gpu_blocks_needed(id, st.pending_work(id)))
            .sum();
        for id in st.waiting_order() {
            if budget == 0 {
                break;
            }
            if st.ledger.entry(id).gpu_tokens > 0 {
                continue;
            }
            let pending = st.pending_work(id);
            if pending == 0 {
                st.enter(id, Phase::Running);
                continue;
            }
            let need = model.blocks_for(pending);
            if need + owed > st.ledger.gpu_free_blocks() {
                break;
            }
            let take = pending.min(budget);
            let recompute = Self::commit(st, id, take);
            budget -= take;
            protected.insert(id);
            owed += need - model.blocks_for(take);
            batch.chunk_assignments.push(ChunkAssignment { id, tokens: take, recompute });
            if take == pending {
                st.enter(id, Phase::Running);
            }
        }
    }

    /// Whole-context admission: each request's pending work runs in one
    /// iteration.
    fn assign_whole(
        &self,
        st: &mut SchedState,
        protected: &BTreeSet<RequestId>,
        decode_tokens: u64,
        batch: &mut BatchState,
    ) {
        let mut prefill = 0u64;
        let resumed: Vec<RequestId> = st
            .running
            .iter()
            .map(|k| k.1)
            .filter(|&id| st.pending_work(id) > 0)
            .collect();
        for id in resumed {
            if st.req(id).phase != Phase::Running {
                continue;
            }
            let pending = st.pending_work(id);
            if !Self::make_room(st, protected, id, pending, &mut batch.evicted) {
                continue;
            }
            let recompute = Self::commit(st, id, pending);
            prefill += pending;
            batch.chunk_assignments.push(ChunkAssignment { id, tokens: pending, recompute });
        }

        for id in st.waiting_order() {
            let pending = st.pending_work(id);
            if pending == 0 {
                st.enter(id, Phase::Running);
                continue;
            }
            if prefill > 0 && decode_tokens + prefill + pending > self.max_batched_tokens {
                break;
            }
            if st.ledger.gpu_blocks_needed(id, pending) > st.ledger.gpu_free_blocks() {
                break;
            }
            let recompute = Self::commit(st, id, pending);
            prefill += pending;
            batch.chunk_assignments.push(ChunkAssignment { id, tokens: pending, recompute });
            st.enter(id, Phase::Running);
        }
    }
}
