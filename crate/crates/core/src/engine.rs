//! Iteration-level simulation loop.
//!
//! Each step admits arrivals, resumes finished interceptions, settles the
//! dispositions of newly paused requests, forms a batch, and advances the
//! clock by the batch's forwarding time plus any synchronous swap stall.
//! When nothing can run, the clock jumps to the next arrival or resumption.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::cost_model::CostModel;
use crate::error::{Error, Result};
use crate::memory::LedgerSnapshot;
use crate::metrics::{MetricsLedger, RequestRecord, WasteBuckets};
use crate::policy::{
    allocate_swap_budget, builtin_profiled_durations, compute_swap_limit, BatchState, DecisionRecord,
    EstimatorMode, IterationPlan, Phase, Policy, PolicyKind, SchedState, SwapBudget, SwapMode, Techniques,
};
use crate::workload::{ClassName, Request};
use crate::RequestId;

fn default_max_sim_seconds() -> f64 {
    24.0 * 3600.0
}

fn default_max_batched_tokens() -> u64 {
    4096
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub techniques: Techniques,
    #[serde(default)]
    pub estimator: EstimatorMode,
    #[serde(default = "default_max_sim_seconds")]
    pub max_sim_seconds: f64,
    #[serde(default = "default_max_batched_tokens")]
    pub max_batched_tokens: u64,
    #[serde(default)]
    pub record_iterations: bool,
    #[serde(default)]
    pub check_invariants: bool,
    #[serde(default)]
    pub ledger_dump_every: Option<u64>,
    #[serde(default = "builtin_profiled_durations")]
    pub profiled_durations: BTreeMap<ClassName, f64>,
}

impl SimConfig {
    pub fn for_policy(kind: PolicyKind) -> Self {
        Self::with_techniques(kind.techniques())
    }

    pub fn with_techniques(techniques: Techniques) -> Self {
        SimConfig {
            techniques,
            estimator: EstimatorMode::Oracle,
            max_sim_seconds: default_max_sim_seconds(),
            max_batched_tokens: default_max_batched_tokens(),
            record_iterations: false,
            check_invariants: false,
            ledger_dump_every: None,
            profiled_durations: builtin_profiled_durations(),
        }
    }
}

impl Default for SimConfig {
    fn default() -> Self {
        Self::for_policy(PolicyKind::InferCept)
    }
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub it: u64,
    /// Iteration start time.
    pub t: f64,
    #[serde(rename = "B")]
    pub batch_tokens: u64,
    pub d: f64,
    pub swap_in: u64,
    pub swap_out: u64,
    pub limit: u64,
    pub stall: f64,
    pub events: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LedgerDump {
    pub it: u64,
    pub t: f64,
    pub ledger: LedgerSnapshot,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub metrics: MetricsLedger,
    pub iterations: Vec<IterationRecord>,
    pub decisions: Vec<DecisionRecord>,
    pub ledger_dumps: Vec<LedgerDump>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Iteration(BatchState),
    /// Nothing was runnable; the clock jumped.
    Idle { from: f64, to: f64 },
    Finished,
}

#[derive(Debug, Clone)]
pub struct Simulator {
    model: CostModel,
    config: SimConfig,
    policy: Policy,
    state: SchedState,
    now: f64,
    iteration: u64,
    arrivals: Vec<RequestId>,
    next_arrival: usize,
    remaining: usize,
    finished: bool,
    waste: WasteBuckets,
    forward_time: f64,
    recompute_time: f64,
    stall_time: f64,
    iterations: Vec<IterationRecord>,
    decisions: Vec<DecisionRecord>,
    dumps: Vec<LedgerDump>,
}

impl Simulator {
    pub fn new(trace: &[Request], model: &CostModel, config: &SimConfig) -> Result<Self> {
        model.validate()?;
        if config.max_sim_seconds.is_nan() || config.max_sim_seconds <= 0.0 {
            return Err(Error::InvalidConfig("max_sim_seconds must be positive".into()));
        }
        let mut ids = BTreeSet::new();
        let capacity = model.capacity_blocks(model.gpu_kv_capacity);
        for r in trace {
            r.validate()?;
            if !ids.insert(r.id) {
                return Err(Error::Validation(format!("duplicate request id {}", r.id)));
            }
            let peak = r.peak_context();
            if model.blocks_for(peak) > capacity {
                return Err(Error::NonTerminating {
                    request: r.id,
                    reason: format!(
                        "peak context of {peak} tokens exceeds GPU KV capacity of {} tokens",
                        capacity * model.block_size
                    ),
                });
            }
        }
        let mut arrivals: Vec<&Request> = trace.iter().collect();
        arrivals.sort_by(|a, b| a.arrival.total_cmp(&b.arrival).then(a.id.cmp(&b.id)));
        Ok(Simulator {
            model: model.clone(),
            config: config.clone(),
            policy: Policy {
                techniques: config.techniques,
                estimator: config.estimator,
                profiled: config.profiled_durations.clone(),
                max_batched_tokens: config.max_batched_tokens,
            },
            state: SchedState::new(model, trace),
            now: 0.0,
            iteration: 0,
            arrivals: arrivals.iter().map(|r| r.id).collect(),
            next_arrival: 0,
            remaining: trace.len(),
            finished: false,
            waste: WasteBuckets::default(),
            forward_time: 0.0,
            recompute_time: 0.0,
            stall_time: 0.0,
            iterations: Vec::new(),
            decisions: Vec::new(),
            dumps: Vec::new(),
        })
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn state(&self) -> &SchedState {
        &self.state
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    fn next_event(&self) -> Option<f64> {
        let arrival = self
            .arrivals
            .get(self.next_arrival)
            .map(|&id| self.state.req(id).arrival());
        let resume = self.state.resume_events.first().map(|k| k.0);
        match (arrival, resume) {
            (Some(a), Some(r)) => Some(a.min(r)),
            (a, r) => a.or(r),
        }
    }

    /// GPU bytes held by requests that are paused or waiting for swap-in.
    fn accrue_idle_memory(&mut self, dt: f64) {
        let st = &mut self.state;
        let mut total = 0.0;
        let held: Vec<RequestId> = st
            .paused
            .keys()
            .copied()
            .chain(st.swap_queue.iter().map(|k| k.1))
            .collect();
        for id in held {
            let bytes = st.ledger.gpu_bytes(id) * dt;
            st.req_mut(id).preserve_waste += bytes;
            total += bytes;
        }
        self.waste.preserve += total;
    }

    fn budget(&self, decode: &[RequestId]) -> SwapBudget {
        if self.policy.techniques.swap != SwapMode::Budgeted {
            return SwapBudget::default();
        }
        let st = &self.state;
        let bs = self.model.block_size;
        let needy = decode
            .iter()
            .filter(|&&id| st.ledger.entry(id).gpu_tokens.is_multiple_of(bs))
            .count() as u64;
        // Evictions free at most one decode slot per block-hungry request,
        // so this limit never exceeds the limit of the batch actually formed.
        let limit = compute_swap_limit(&self.model, decode.len() as u64 - needy);
        let pending_in = st.swap_queue.iter().map(|k| st.ledger.entry(k.1).cpu_tokens).sum();
        let pending_out = st.intercepted.iter().map(|&id| st.ledger.entry(id).gpu_tokens).sum();
        let free_gpu = st.ledger.gpu_free_blocks().saturating_sub(needy) * bs;
        let chunk_cap = if self.policy.techniques.chunked {
            self.model.saturation_point.saturating_sub(decode.len() as u64).max(1)
        } else {
            self.config.max_batched_tokens
        };
        let demand: u64 = st
            .waiting
            .iter()
            .map(|k| k.1)
            .chain(st.running.iter().map(|k| k.1))
            .map(|id| st.pending_work(id))
            .sum();
        allocate_swap_budget(
            limit,
            pending_in,
            pending_out,
            free_gpu,
            st.ledger.cpu_free_tokens(),
            demand.min(chunk_cap),
        )
    }

    fn accrue_iteration(&mut self, batch: &BatchState, fwd: f64) {
        let d = fwd + batch.stall;
        self.accrue_idle_memory(d);

        let st = &self.state;
        let recompute = batch.recompute_tokens();
        let mut recomputing: BTreeSet<RequestId> = batch
            .chunk_assignments
            .iter()
            .filter(|c| c.recompute > 0)
            .map(|c| c.id)
            .collect();
        recomputing.extend(
            st.waiting
                .iter()
                .chain(st.running.iter())
                .map(|k| k.1)
                .filter(|&id| {
                    let e = st.ledger.entry(id);
                    e.gpu_tokens > 0 && e.discarded_tokens > 0
                }),
        );
        let held: f64 = recomputing.iter().map(|&id| st.ledger.gpu_bytes(id)).sum();
        self.waste.recompute += held * d;
        if recompute > 0 {
            let others: f64 = batch
                .decode_ids
                .iter()
                .copied()
                .chain(batch.chunk_assignments.iter().map(|c| c.id))
                .collect::<BTreeSet<_>>()
                .into_iter()
                .filter(|id| !recomputing.contains(id))
                .map(|id| st.ledger.gpu_bytes(id))
                .sum();
            let b = batch.total_query_tokens;
            let marginal = fwd - self.model.t_fwd((b - recompute) as f64);
            self.waste.recompute += others * marginal;
            self.recompute_time += marginal;
        }
        self.waste.stall += batch.stall * st.ledger.gpu_used();
        self.forward_time += fwd;
        self.stall_time += batch.stall;
    }

    fn complete(&mut self, id: RequestId) {
        self.state.leave(id);
        self.state.ledger.release(id);
        let r = self.state.req_mut(id);
        r.phase = Phase::Completed;
        r.completion = Some(self.now);
        self.remaining -= 1;
    }

    fn stop(&mut self) -> StepOutcome {
        self.finished = true;
        StepOutcome::Finished
    }

    /// Runs one loop body.
    pub fn step(&mut self) -> Result<StepOutcome> {
        if self.finished {
            return Ok(StepOutcome::Finished);
        }
        if self.remaining == 0 || self.now >= self.config.max_sim_seconds {
            return Ok(self.stop());
        }
        let mut events = Vec::new();
        while let Some(&id) = self.arrivals.get(self.next_arrival) {
            if self.state.req(id).arrival() > self.now {
                break;
            }
            self.state.enter(id, Phase::Waiting);
            self.next_arrival += 1;
            events.push(format!("arrive:{id}"));
        }
        while let Some(k) = self.state.resume_events.first().copied() {
            if k.0 > self.now {
                break;
            }
            self.policy.on_resume(&mut self.state, k.1, self.now);
            events.push(format!("resume:{}", k.1));
        }

        let decode = self.state.decode_ready();
        let plan = IterationPlan {
            now: self.now,
            decode_count: decode.len() as u64,
            budget: self.budget(&decode),
        };
        let (swap_outs, stall) =
            self.policy
                .on_interceptions(&mut self.state, &self.model, &plan, &mut self.decisions);
        for id in self
            .policy
            .reevaluate_paused(&mut self.state, &self.model, &plan, &mut self.decisions)
        {
            events.push(format!("discard:{id}"));
        }
        let batch = self
            .policy
            .form_batch(&mut self.state, &self.model, &plan, &decode, swap_outs, stall);

        if batch.is_empty() {
            let Some(next) = self.next_event() else {
                let stuck = self
                    .state
                    .reqs
                    .values()
                    .find(|r| r.phase != Phase::Completed)
                    .map_or(0, |r| r.request.id);
                return Err(Error::NonTerminating {
                    request: stuck,
                    reason: "no runnable work and no pending events".into(),
                });
            };
            let from = self.now;
            let to = next.min(self.config.max_sim_seconds);
            self.accrue_idle_memory(to - from);
            self.now = to;
            return Ok(StepOutcome::Idle { from, to });
        }

        let fwd = self.model.t_fwd(batch.total_query_tokens as f64);
        let start = self.now;
        self.accrue_iteration(&batch, fwd);
        self.now += fwd + batch.stall;
        self.iteration += 1;

        for id in batch.evicted.iter() {
            events.push(format!("evict:{id}"));
        }
        for &id in &batch.decode_ids {
            let now = self.now;
            let r = self.state.req_mut(id);
            r.generated += 1;
            r.decoded_in_seg += 1;
            r.first_token.get_or_insert(now);
            if r.segment_done() {
                if r.current_interception().is_some() {
                    self.state.enter(id, Phase::Intercepted);
                    events.push(format!("intercept:{id}"));
                } else {
                    self.complete(id);
                    events.push(format!("complete:{id}"));
                }
            }
        }

        if self.config.check_invariants {
            self.state
                .ledger
                .check_invariants()
                .and_then(|_| self.state.check_partition())
                .map_err(|message| Error::Invariant {
                    iteration: self.iteration,
                    message,
                })?;
        }
        if self
            .config
            .ledger_dump_every
            .is_some_and(|n| n > 0 && self.iteration.is_multiple_of(n))
        {
            self.dumps.push(LedgerDump {
                it: self.iteration,
                t: self.now,
                ledger: self.state.ledger.snapshot(),
            });
        }
        if self.config.record_iterations {
            self.iterations.push(IterationRecord {
                it: self.iteration,
                t: start,
                batch_tokens: batch.total_query_tokens,
                d: fwd + batch.stall,
                swap_in: batch.swapped_in(),
                swap_out: batch.swapped_out(),
                limit: batch.swap_limit,
                stall: batch.stall,
                events,
            });
        }
        Ok(StepOutcome::Iteration(batch))
    }

    pub fn finish(self) -> SimOutput {
        let requests = self
            .state
            .reqs
            .values()
            .map(|r| RequestRecord {
                id: r.request.id,
                class: r.request.class_label().to_string(),
                arrival: r.arrival(),
                first_token_time: r.first_token,
                completion: r.completion,
                output_tokens: r.request.output_tokens(),
                total_interception_time: r.request.total_interception_time(),
                incomplete: r.completion.is_none(),
                preserve_waste: r.preserve_waste,
            })
            .collect();
        SimOutput {
            metrics: MetricsLedger {
                requests,
                waste: self.waste,
                forward_time: self.forward_time,
                recompute_time: self.recompute_time,
                stall_time: self.stall_time,
                iterations: self.iteration,
                sim_end: self.now,
                gpu_capacity: self.state.ledger.gpu_capacity(),
            },
            iterations: self.iterations,
            decisions: self.decisions,
            ledger_dumps: self.dumps,
        }
    }
}

/// Simulates `trace` to completion or the time limit.
pub fn run(trace: &[Request], model: &CostModel, config: &SimConfig) -> Result<SimOutput> {
    let mut sim = Simulator::new(trace, model, config)?;
    while !matches!(sim.step()?, StepOutcome::Finished) {}
    Ok(sim.finish())
}
