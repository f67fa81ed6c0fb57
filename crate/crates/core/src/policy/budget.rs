//! Per-iteration swap budget.
//!
//! Swapping is free only while it hides behind model forwarding, so the
//! tokens moved in one iteration are capped at the swap limit `N` with
//! `t_swap(N) = t_fwd(B)`. That limit is then split between swap-in and
//! swap-out.

use serde::{Deserialize, Serialize};

use crate::cost_model::CostModel;

/// Tokens that can be swapped during an iteration of `batch_tokens` query
/// tokens without stalling it.
pub fn compute_swap_limit(model: &CostModel, batch_tokens: u64) -> u64 {
    let ratio = model.t_fwd(batch_tokens as f64) / model.swap_per_token;
    if !ratio.is_finite() {
        return if ratio > 0.0 { u64::MAX } else { 0 };
    }
    // Absorb one-ulp division error so exact quotients are not floored down.
    (ratio * (1.0 + 1e-12)).floor().max(0.0) as u64
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapBudget {
    pub limit: u64,
    pub alloc_in: u64,
    pub alloc_out: u64,
}

impl SwapBudget {
    /// Tokens the batch can newly schedule under this split.
    pub fn schedulable(&self, free_gpu: u64, waiting_demand: u64) -> u64 {
        (self.alloc_out + free_gpu)
            .saturating_sub(self.alloc_in)
            .min(waiting_demand)
    }
}

/// Splits `limit` between swap-in and swap-out.
///
/// Constraints: `in <= pending_in`, `out <= pending_out`, `in + out <= limit`,
/// `out <= free_cpu + in`, and `in + NS <= out + free_gpu` where
/// `NS = min(waiting_demand, out + free_gpu - in)` are the newly schedulable
/// tokens. Swap-in is maximized first so resumed requests always get the
/// budget; among those, the split maximizing `NS` and then `out` wins.
/// `NS` is nondecreasing in `out`, so the demand never changes the split.
pub fn allocate_swap_budget(
    limit: u64,
    pending_in: u64,
    pending_out: u64,
    free_gpu: u64,
    free_cpu: u64,
    _waiting_demand: u64,
) -> SwapBudget {
    // Largest swap-in for which some swap-out keeps GPU memory feasible:
    // in <= out + free_gpu with out <= min(pending_out, limit - in), and
    // out <= free_cpu + in always admits out = in - free_gpu when needed.
    let alloc_in = pending_in
        .min(limit)
        .min(free_gpu.saturating_add(pending_out))
        .min(free_gpu.saturating_add(limit) / 2);
    // NS grows with out until it saturates at the demand; the tie-break then
    // keeps growing out, so the maximum feasible out is always optimal.
    let alloc_out = pending_out
        .min(limit - alloc_in)
        .min(free_cpu.saturating_add(alloc_in));
    SwapBudget {
        limit,
        alloc_in,
        alloc_out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive search over every integer split.
    fn brute_force(limit: u64, pin: u64, pout: u64, gpu: u64, cpu: u64, demand: u64) -> (u64, u64, u64) {
        let mut best: Option<(u64, u64, u64)> = None;
        for i in 0..=pin.min(limit) {
            for o in 0..=pout.min(limit - i) {
                if o > cpu + i || i > o + gpu {
                    continue;
                }
                let ns = (o + gpu - i).min(demand);
                let key = (i, ns, o);
                if best.is_none_or(|b| key > b) {
                    best = Some(key);
                }
            }
        }
        best.unwrap_or((0, 0, 0))
    }

    #[test]
    fn limit_examples() {
        let m = CostModel {
            t0: 0.02,
            slope_below: 1e-5,
            slope_above: 3e-5,
            saturation_point: 2048,
            swap_per_token: 50e-6,
            ..CostModel::synthetic()
        };
        assert_eq!(compute_swap_limit(&m, 0), 400);
        assert_eq!(compute_swap_limit(&m, 1000), 600);
        let slow = CostModel { swap_per_token: f64::INFINITY, ..m };
        assert_eq!(compute_swap_limit(&slow, 1000), 0);
    }

    #[test]
    fn budget_example() {
        let b = allocate_swap_budget(600, 200, 1000, 300, 10_000, u64::MAX);
        assert_eq!((b.alloc_in, b.alloc_out), (200, 400));
        assert_eq!(b.schedulable(300, u64::MAX), 500);
        assert_eq!(brute_force(600, 200, 1000, 300, 10_000, 5000), (200, 500, 400));
    }

    #[test]
    fn degenerate_budgets() {
        assert_eq!(allocate_swap_budget(0, 100, 100, 100, 100, 100), SwapBudget::default());
        let b = allocate_swap_budget(600, 0, 1000, 300, 0, 100);
        assert_eq!((b.alloc_in, b.alloc_out), (0, 0));
    }

    proptest! {
        #[test]
        fn closed_form_matches_enumeration(
            limit in 0u64..40, pin in 0u64..40, pout in 0u64..40,
            gpu in 0u64..40, cpu in 0u64..40, demand in 0u64..60,
        ) {
            let b = allocate_swap_budget(limit, pin, pout, gpu, cpu, demand);
            let ns = b.schedulable(gpu, demand);
            prop_assert_eq!((b.alloc_in, ns, b.alloc_out), brute_force(limit, pin, pout, gpu, cpu, demand));
        }
    }
}
