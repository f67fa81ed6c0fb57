//! Rate sweeps and other multi-run experiments.
//!
//! A sweep runs one base trace at several arrival rates by rescaling its
//! inter-arrival gaps, so every cell serves identical request bodies. Cells
//! run in parallel; results come back in (rate, configuration) order.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost_model::CostModel;
use crate::engine::{run, SimConfig};
use crate::error::{Error, Result};
use crate::metrics::Summary;
use crate::workload::{rescale_arrivals, Request};

/// A labelled simulation configuration, e.g. one policy.
#[derive(Debug, Clone)]
pub struct Variant {
    pub label: String,
    pub config: SimConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub rate: f64,
    pub label: String,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rate: f64,
    pub policy: String,
    pub norm_latency: f64,
    pub throughput: f64,
    pub ttft: f64,
    pub waste_pct: f64,
}

impl From<&CellResult> for SweepRow {
    fn from(c: &CellResult) -> Self {
        SweepRow {
            rate: c.rate,
            policy: c.label.clone(),
            norm_latency: c.summary.normalized_latency.unwrap_or(f64::NAN),
            throughput: c.summary.throughput,
            ttft: c.summary.ttft.unwrap_or(f64::NAN),
            waste_pct: c.summary.waste.total_pct,
        }
    }
}

/// Runs every (rate, variant) cell. `base` is the trace generated at
/// `base_rate`; `threads` caps parallelism (rayon's default when `None`).
pub fn run_sweep(
    base: &[Request],
    base_rate: f64,
    rates: &[f64],
    variants: &[Variant],
    model: &CostModel,
    threads: Option<usize>,
) -> Result<Vec<CellResult>> {
    if rates.is_empty() || variants.is_empty() {
        return Err(Error::InvalidConfig("a sweep needs at least one rate and one policy".into()));
    }
    if let Some(bad) = rates.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
        return Err(Error::InvalidConfig(format!("sweep rate {bad} is not positive")));
    }
    let traces: Vec<Vec<Request>> = rates
        .iter()
        .map(|&r| rescale_arrivals(base, base_rate, r))
        .collect();
    let cells: Vec<(usize, usize)> = (0..rates.len())
        .flat_map(|r| (0..variants.len()).map(move |v| (r, v)))
        .collect();
    let work = || {
        cells
            .par_iter()
            .map(|&(r, v)| {
                let out = run(&traces[r], model, &variants[v].config)?;
                Ok(CellResult {
                    rate: rates[r],
                    label: variants[v].label.clone(),
                    summary: out.metrics.summary(),
                })
            })
            .collect::<Result<Vec<_>>>()
    };
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    }
}

pub fn write_sweep_csv<W: Write>(out: W, cells: &[CellResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for c in cells {
        w.serialize(SweepRow::from(c))?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Reads rows written by [`write_sweep_csv`].
pub fn read_sweep_csv(path: impl AsRef<std::path::Path>) -> Result<Vec<SweepRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Rate at which `points` (rate, latency), sorted by rate, first reach
/// `latency`, by linear interpolation. `None` if never reached; the lowest
/// rate if already above it there.
pub fn rate_at_latency(points: &[(f64, f64)], latency: f64) -> Option<f64> {
    let first = points.first()?;
    if first.1 >= latency {
        return Some(first.0);
    }
    points.windows(2).find_map(|w| {
        let ((r0, l0), (r1, l1)) = (w[0], w[1]);
        (l1 >= latency).then(|| r0 + (r1 - r0) * (latency - l0) / (l1 - l0))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation() {
        let pts = [(1.0, 0.02), (2.0, 0.03), (3.0, 0.07)];
        assert_eq!(rate_at_latency(&pts, 0.05), Some(2.5));
        assert_eq!(rate_at_latency(&pts, 0.01), Some(1.0));
        assert_eq!(rate_at_latency(&pts, 0.5), None);
        assert_eq!(rate_at_latency(&[], 0.5), None);
    }
}
