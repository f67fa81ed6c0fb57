//! GPU/CPU KV-cache ledger.
//!
//! Each request's computed context is split between GPU-resident tokens,
//! host-resident (swapped) tokens, and discarded tokens awaiting
//! recomputation. Occupancy is charged in whole blocks per request, mirroring
//! a paged allocator; a failed operation leaves the ledger untouched.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::cost_model::CostModel;
use crate::RequestId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MemoryError {
    #[error("insufficient GPU memory: need {needed} blocks, {free} free")]
    InsufficientGpu { needed: u64, free: u64 },
    #[error("insufficient CPU memory: need {needed} blocks, {free} free")]
    InsufficientCpu { needed: u64, free: u64 },
    #[error("request {id}: {what}")]
    Precondition { id: RequestId, what: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct KvEntry {
    pub gpu_tokens: u64,
    pub cpu_tokens: u64,
    pub discarded_tokens: u64,
    pub computed_context: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LedgerSnapshot {
    pub gpu_used: f64,
    pub cpu_used: f64,
    pub gpu_capacity: f64,
    pub cpu_capacity: f64,
    pub entries: BTreeMap<RequestId, KvEntry>,
}

#[derive(Debug, Clone)]
pub struct KvLedger {
    block_size: u64,
    bytes_per_block: f64,
    gpu_capacity_blocks: u64,
    cpu_capacity_blocks: u64,
    gpu_blocks: u64,
    cpu_blocks: u64,
    entries: BTreeMap<RequestId, KvEntry>,
}

impl KvLedger {
    pub fn new(model: &CostModel) -> Self {
        KvLedger {
            block_size: model.block_size,
            bytes_per_block: model.bytes_per_block(),
            gpu_capacity_blocks: model.capacity_blocks(model.gpu_kv_capacity),
            cpu_capacity_blocks: model.capacity_blocks(model.cpu_kv_capacity),
            gpu_blocks: 0,
            cpu_blocks: 0,
            entries: BTreeMap::new(),
        }
    }

    fn blocks(&self, tokens: u64) -> u64 {
        tokens.div_ceil(self.block_size)
    }

    pub fn entry(&self, id: RequestId) -> KvEntry {
        self.entries.get(&id).copied().unwrap_or_default()
    }

    pub fn entries(&self) -> impl Iterator<Item = (RequestId, &KvEntry)> {
        self.entries.iter().map(|(id, e)| (*id, e))
    }

    pub fn gpu_used(&self) -> f64 {
        self.gpu_blocks as f64 * self.bytes_per_block
    }

    pub fn cpu_used(&self) -> f64 {
        self.cpu_blocks as f64 * self.bytes_per_block
    }

    pub fn gpu_capacity(&self) -> f64 {
        self.gpu_capacity_blocks as f64 * self.bytes_per_block
    }

    pub fn gpu_free_blocks(&self) -> u64 {
        self.gpu_capacity_blocks - self.gpu_blocks
    }

    pub fn cpu_free_blocks(&self) -> u64 {
        self.cpu_capacity_blocks - self.cpu_blocks
    }

    pub fn gpu_free_tokens(&self) -> u64 {
        self.gpu_free_blocks() * self.block_size
    }

    pub fn cpu_free_tokens(&self) -> u64 {
        self.cpu_free_blocks() * self.block_size
    }

    pub fn gpu_capacity_tokens(&self) -> u64 {
        self.gpu_capacity_blocks * self.block_size
    }

    /// GPU bytes held by one request.
    pub fn gpu_bytes(&self, id: RequestId) -> f64 {
        self.blocks(self.entry(id).gpu_tokens) as f64 * self.bytes_per_block
    }

    /// Tokens `id` could add on the GPU right now, counting the slack in its
    /// last partially filled block.
    pub fn gpu_headroom(&self, id: RequestId) -> u64 {
        let gpu = self.entry(id).gpu_tokens;
        self.gpu_free_tokens() + self.blocks(gpu) * self.block_size - gpu
    }

    /// Number of extra GPU blocks growing `id` by `tokens` would take.
    pub fn gpu_blocks_needed(&self, id: RequestId, tokens: u64) -> u64 {
        let gpu = self.entry(id).gpu_tokens;
        self.blocks(gpu + tokens) - self.blocks(gpu)
    }

    fn reserve_gpu(&mut self, id: RequestId, tokens: u64) -> Result<(), MemoryError> {
        let needed = self.gpu_blocks_needed(id, tokens);
        let free = self.gpu_free_blocks();
        if needed > free {
            return Err(MemoryError::InsufficientGpu { needed, free });
        }
        self.gpu_blocks += needed;
        Ok(())
    }

    fn release_gpu(&mut self, before: u64, after: u64) {
        self.gpu_blocks -= self.blocks(before) - self.blocks(after);
    }

    /// Newly computed tokens (prefill or decode) land on the GPU.
    pub fn allocate(&mut self, id: RequestId, tokens: u64) -> Result<(), MemoryError> {
        if tokens == 0 {
            return Ok(());
        }
        self.reserve_gpu(id, tokens)?;
        let e = self.entries.entry(id).or_default();
        e.gpu_tokens += tokens;
        e.computed_context += tokens;
        Ok(())
    }

    fn check_gpu(&self, id: RequestId, tokens: u64, op: &str) -> Result<KvEntry, MemoryError> {
        let e = self.entry(id);
        if tokens > e.gpu_tokens {
            return Err(MemoryError::Precondition {
                id,
                what: format!("{op} {tokens} tokens but only {} on GPU", e.gpu_tokens),
            });
        }
        Ok(e)
    }

    pub fn swap_out(&mut self, id: RequestId, tokens: u64) -> Result<(), MemoryError> {
        let e = self.check_gpu(id, tokens, "swap out")?;
        if tokens == 0 {
            return Ok(());
        }
        let needed = self.blocks(e.cpu_tokens + tokens) - self.blocks(e.cpu_tokens);
        let free = self.cpu_free_blocks();
        if needed > free {
            return Err(MemoryError::InsufficientCpu { needed, free });
        }
        self.cpu_blocks += needed;
        self.release_gpu(e.gpu_tokens, e.gpu_tokens - tokens);
        let e = self.entries.get_mut(&id).expect("checked above");
        e.gpu_tokens -= tokens;
        e.cpu_tokens += tokens;
        Ok(())
    }

    pub fn swap_in(&mut self, id: RequestId, tokens: u64) -> Result<(), MemoryError> {
        let e = self.entry(id);
        if tokens > e.cpu_tokens {
            return Err(MemoryError::Precondition {
                id,
                what: format!("swap in {tokens} tokens but only {} on CPU", e.cpu_tokens),
            });
        }
        if tokens == 0 {
            return Ok(());
        }
        self.reserve_gpu(id, tokens)?;
        self.cpu_blocks -= self.blocks(e.cpu_tokens) - self.blocks(e.cpu_tokens - tokens);
        let e = self.entries.get_mut(&id).expect("checked above");
        e.cpu_tokens -= tokens;
        e.gpu_tokens += tokens;
        Ok(())
    }

    /// Drops GPU-resident KV; it must be recomputed later.
    pub fn discard(&mut self, id: RequestId, tokens: u64) -> Result<(), MemoryError> {
        let e = self.check_gpu(id, tokens, "discard")?;
        if tokens == 0 {
            return Ok(());
        }
        self.release_gpu(e.gpu_tokens, e.gpu_tokens - tokens);
        let e = self.entries.get_mut(&id).expect("checked above");
        e.gpu_tokens -= tokens;
        e.discarded_tokens += tokens;
        Ok(())
    }

    /// Recomputed tokens move from discarded back onto the GPU.
    pub fn recompute_commit(&mut self, id: RequestId, tokens: u64) -> Result<(), MemoryError> {
        let e = self.entry(id);
        if tokens > e.discarded_tokens {
            return Err(MemoryError::Precondition {
                id,
                what: format!(
                    "recompute {tokens} tokens but only {} discarded",
                    e.discarded_tokens
                ),
            });
        }
        if tokens == 0 {
            return Ok(());
        }
        self.reserve_gpu(id, tokens)?;
        let e = self.entries.get_mut(&id).expect("checked above");
        e.discarded_tokens -= tokens;
        e.gpu_tokens += tokens;
        Ok(())
    }

    /// Frees everything a finished request holds.
    pub fn release(&mut self, id: RequestId) {
        if let Some(e) = self.entries.remove(&id) {
            self.gpu_blocks -= self.blocks(e.gpu_tokens);
            self.cpu_blocks -= self.blocks(e.cpu_tokens);
        }
    }

    /// Conservation and capacity checks; returns a description of the first
    /// violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut gpu = 0;
        let mut cpu = 0;
        for (id, e) in &self.entries {
            if e.gpu_tokens + e.cpu_tokens + e.discarded_tokens != e.computed_context {
                return Err(format!("request {id}: placement does not sum to context: {e:?}"));
            }
            gpu += self.blocks(e.gpu_tokens);
            cpu += self.blocks(e.cpu_tokens);
        }
        if gpu != self.gpu_blocks || cpu != self.cpu_blocks {
            return Err(format!(
                "block totals drifted: gpu {gpu} vs {}, cpu {cpu} vs {}",
                self.gpu_blocks, self.cpu_blocks
            ));
        }
        if self.gpu_blocks > self.gpu_capacity_blocks || self.cpu_blocks > self.cpu_capacity_blocks {
            return Err("capacity exceeded".into());
        }
        Ok(())
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot {
            gpu_used: self.gpu_used(),
            cpu_used: self.cpu_used(),
            gpu_capacity: self.gpu_capacity(),
            cpu_capacity: self.cpu_capacity_blocks as f64 * self.bytes_per_block,
            entries: self.entries.clone(),
        }
    }
}
