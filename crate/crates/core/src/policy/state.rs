//! Scheduler state shared by every policy: per-request progress, the three
//! queues, paused records, and the KV ledger.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use crate::cost_model::CostModel;
use crate::memory::KvLedger;
use crate::workload::{Interception, Request};
use crate::RequestId;

use super::PausedRecord;

/// Queue position: a time key, ties broken by id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueueKey(pub f64, pub RequestId);

impl Eq for QueueKey {}

impl PartialOrd for QueueKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for QueueKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    NotArrived,
    Waiting,
    Running,
    /// Finished a segment; disposition is decided at the next iteration start.
    Intercepted,
    Paused,
    SwapQueue,
    Completed,
}

#[derive(Debug, Clone)]
pub struct ReqRuntime {
    pub request: Request,
    pub phase: Phase,
    /// FCFS key in the waiting and swap queues.
    pub queue_key: f64,
    pub seg_idx: usize,
    pub decoded_in_seg: u32,
    /// Prompt or return tokens not yet computed.
    pub pending_prefill: u64,
    pub generated: u64,
    pub first_token: Option<f64>,
    pub completion: Option<f64>,
    pub preserve_waste: f64,
}

impl ReqRuntime {
    pub fn arrival(&self) -> f64 {
        self.request.arrival
    }

    pub fn current_interception(&self) -> Option<&Interception> {
        self.request
            .segments
            .get(self.seg_idx)
            .and_then(|s| s.interception.as_ref())
    }

    pub fn segment_done(&self) -> bool {
        self.request
            .segments
            .get(self.seg_idx)
            .is_none_or(|s| self.decoded_in_seg >= s.decode_tokens)
    }
}

#[derive(Debug, Clone)]
pub struct SchedState {
    pub reqs: BTreeMap<RequestId, ReqRuntime>,
    /// Ordered by original arrival.
    pub running: BTreeSet<QueueKey>,
    pub waiting: BTreeSet<QueueKey>,
    pub swap_queue: BTreeSet<QueueKey>,
    pub paused: BTreeMap<RequestId, PausedRecord>,
    /// Paused requests by interception end time.
    pub resume_events: BTreeSet<QueueKey>,
    /// Interceptions fired by the last iteration, in firing order.
    pub intercepted: Vec<RequestId>,
    pub ledger: KvLedger,
}

impl SchedState {
    pub fn new(model: &CostModel, trace: &[Request]) -> Self {
        let reqs = trace
            .iter()
            .map(|r| {
                (
                    r.id,
                    ReqRuntime {
                        request: r.clone(),
                        phase: Phase::NotArrived,
                        queue_key: r.arrival,
                        seg_idx: 0,
                        decoded_in_seg: 0,
                        pending_prefill: u64::from(r.prompt_tokens),
                        generated: 0,
                        first_token: None,
                        completion: None,
                        preserve_waste: 0.0,
                    },
                )
            })
            .collect();
        SchedState {
            reqs,
            running: BTreeSet::new(),
            waiting: BTreeSet::new(),
            swap_queue: BTreeSet::new(),
            paused: BTreeMap::new(),
            resume_events: BTreeSet::new(),
            intercepted: Vec::new(),
            ledger: KvLedger::new(model),
        }
    }

    pub fn req(&self, id: RequestId) -> &ReqRuntime {
        &self.reqs[&id]
    }

    pub fn req_mut(&mut self, id: RequestId) -> &mut ReqRuntime {
        self.reqs.get_mut(&id).expect("unknown request id")
    }

    fn running_key(&self, id: RequestId) -> QueueKey {
        QueueKey(self.req(id).arrival(), id)
    }

    fn queue_key(&self, id: RequestId) -> QueueKey {
        QueueKey(self.req(id).queue_key, id)
    }

    /// Removes `id` from whichever queue its phase says it is in.
    pub fn leave(&mut self, id: RequestId) {
        let rk = self.running_key(id);
        let qk = self.queue_key(id);
        match self.req(id).phase {
            Phase::Running => {
                self.running.remove(&rk);
            }
            Phase::Waiting => {
                self.waiting.remove(&qk);
            }
            Phase::SwapQueue => {
                self.swap_queue.remove(&qk);
            }
            Phase::Paused => {
                if let Some(rec) = self.paused.remove(&id) {
                    self.resume_events.remove(&QueueKey(rec.end_time, id));
                }
            }
            Phase::Intercepted => self.intercepted.retain(|&x| x != id),
            Phase::NotArrived | Phase::Completed => {}
        }
    }

    /// Moves `id` into the queue for `phase`.
    pub fn enter(&mut self, id: RequestId, phase: Phase) {
        self.leave(id);
        self.req_mut(id).phase = phase;
        match phase {
            Phase::Running => {
                let k = self.running_key(id);
                self.running.insert(k);
            }
            Phase::Waiting => {
                let k = self.queue_key(id);
                self.waiting.insert(k);
            }
            Phase::SwapQueue => {
                let k = self.queue_key(id);
                self.swap_queue.insert(k);
            }
            Phase::Intercepted => self.intercepted.push(id),
            Phase::Paused => {}
            Phase::NotArrived | Phase::Completed => {}
        }
    }

    pub fn pause(&mut self, record: PausedRecord) {
        let id = record.request_id;
        self.leave(id);
        self.req_mut(id).phase = Phase::Paused;
        self.resume_events.insert(QueueKey(record.end_time, id));
        self.paused.insert(id, record);
    }

    /// Running requests with nothing left to prefill, in arrival order.
    pub fn decode_ready(&self) -> Vec<RequestId> {
        self.running
            .iter()
            .map(|k| k.1)
            .filter(|&id| self.pending_work(id) == 0)
            .collect()
    }

    /// Discarded plus not-yet-prefilled tokens.
    pub fn pending_work(&self, id: RequestId) -> u64 {
        self.ledger.entry(id).discarded_tokens + self.req(id).pending_prefill
    }

    /// GPU tokens (block-granular) held by running requests.
    pub fn running_gpu_tokens(&self, model: &CostModel) -> u64 {
        self.running
            .iter()
            .map(|k| model.blocks_for(self.ledger.entry(k.1).gpu_tokens) * model.block_size)
            .sum()
    }

    pub fn running_gpu_bytes(&self) -> f64 {
        self.running.iter().map(|k| self.ledger.gpu_bytes(k.1)).sum()
    }

    /// Discards `id`'s GPU context. A request with context on the CPU stays
    /// in the swap queue; any other goes to the waiting queue.
    pub fn evict(&mut self, id: RequestId) {
        let e = self.ledger.entry(id);
        let (gpu, cpu) = (e.gpu_tokens, e.cpu_tokens);
        self.ledger
            .discard(id, gpu)
            .expect("discarding resident tokens cannot fail");
        self.enter(id, if cpu > 0 { Phase::SwapQueue } else { Phase::Waiting });
    }

    /// Request ids in waiting-queue order.
    pub fn waiting_order(&self) -> Vec<RequestId> {
        self.waiting.iter().map(|k| k.1).collect()
    }

    pub fn swap_order(&self) -> Vec<RequestId> {
        self.swap_queue.iter().map(|k| k.1).collect()
    }

    /// Every request is in exactly the structure its phase names.
    pub fn check_partition(&self) -> Result<(), String> {
        let mut count = 0usize;
        for (&id, r) in &self.reqs {
            let inside = [
                self.running.contains(&QueueKey(r.arrival(), id)),
                self.waiting.contains(&QueueKey(r.queue_key, id)),
                self.swap_queue.contains(&QueueKey(r.queue_key, id)),
                self.paused.contains_key(&id),
                self.intercepted.contains(&id),
            ];
            let expected = match r.phase {
                Phase::Running => Some(0),
                Phase::Waiting => Some(1),
                Phase::SwapQueue => Some(2),
                Phase::Paused => Some(3),
                Phase::Intercepted => Some(4),
                Phase::NotArrived | Phase::Completed => None,
            };
            for (slot, &present) in inside.iter().enumerate() {
                if present != (expected == Some(slot)) {
                    return Err(format!("request {id} in phase {:?} misplaced", r.phase));
                }
            }
            count += usize::from(expected.is_some());
        }
        let total = self.running.len()
            + self.waiting.len()
            + self.swap_queue.len()
            + self.paused.len()
            + self.intercepted.len();
        if total != count {
            return Err(format!("queues hold {total} entries for {count} live requests"));
        }
        Ok(())
    }
}
