//! Per-request timestamps, realized memory waste, and the aggregate serving
//! metrics computed from them.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::RequestId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: RequestId,
    pub class: String,
    pub arrival: f64,
    pub first_token_time: Option<f64>,
    pub completion: Option<f64>,
    pub output_tokens: u64,
    pub total_interception_time: f64,
    pub incomplete: bool,
    /// Realized GPU bytes x seconds held while paused with a kept context.
    pub preserve_waste: f64,
}

impl RequestRecord {
    pub fn ttft(&self) -> Option<f64> {
        self.first_token_time.map(|t| t - self.arrival)
    }

    /// End-to-end latency minus interception time, per output token.
    pub fn normalized_latency(&self) -> Option<f64> {
        let done = self.completion?;
        (self.output_tokens > 0)
            .then(|| (done - self.arrival - self.total_interception_time) / self.output_tokens as f64)
    }
}

/// Realized waste in bytes x seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WasteBuckets {
    pub preserve: f64,
    pub recompute: f64,
    pub stall: f64,
}

impl WasteBuckets {
    pub fn total(&self) -> f64 {
        self.preserve + self.recompute + self.stall
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLedger {
    pub requests: Vec<RequestRecord>,
    pub waste: WasteBuckets,
    /// Sum of iteration forwarding time, stalls excluded.
    pub forward_time: f64,
    /// Iteration time added by recomputed tokens over the same batch
    /// without them.
    pub recompute_time: f64,
    pub stall_time: f64,
    pub iterations: u64,
    pub sim_end: f64,
    pub gpu_capacity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WasteReport {
    pub preserve_gb_min: f64,
    pub recompute_gb_min: f64,
    pub stall_gb_min: f64,
    pub total_gb_min: f64,
    pub preserve_pct: f64,
    pub recompute_pct: f64,
    pub stall_pct: f64,
    pub total_pct: f64,
    pub recompute_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub requests: usize,
    pub completed: usize,
    pub incomplete: usize,
    pub normalized_latency: Option<f64>,
    pub throughput: f64,
    pub ttft: Option<f64>,
    pub waste: WasteReport,
    pub sim_end: f64,
    pub iterations: u64,
}

/// Median of a nonempty slice; mean of the middle pair for even lengths.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

const GB_MIN: f64 = 1e9 * 60.0;

impl MetricsLedger {
    pub fn completed(&self) -> impl Iterator<Item = &RequestRecord> {
        self.requests.iter().filter(|r| r.completion.is_some())
    }

    pub fn normalized_latency(&self) -> Result<f64> {
        let mut v: Vec<f64> = self.requests.iter().filter_map(|r| r.normalized_latency()).collect();
        median(&mut v).ok_or(Error::UndefinedMetric("normalized latency needs a completed request"))
    }

    /// Completed requests per second over `horizon`, by default the last
    /// completion time.
    pub fn throughput(&self, horizon: Option<f64>) -> f64 {
        let done = self.completed().count();
        let horizon = horizon.unwrap_or_else(|| {
            self.completed()
                .filter_map(|r| r.completion)
                .fold(0.0, f64::max)
        });
        if done == 0 || horizon <= 0.0 {
            0.0
        } else {
            done as f64 / horizon
        }
    }

    pub fn ttft(&self) -> Result<f64> {
        let mut v: Vec<f64> = self.requests.iter().filter_map(|r| r.ttft()).collect();
        median(&mut v).ok_or(Error::UndefinedMetric("time to first token needs a generated token"))
    }

    pub fn waste_report(&self) -> WasteReport {
        let capacity = self.gpu_capacity * self.sim_end;
        let pct = |x: f64| if capacity > 0.0 { 100.0 * x / capacity } else { 0.0 };
        let w = &self.waste;
        WasteReport {
            preserve_gb_min: w.preserve / GB_MIN,
            recompute_gb_min: w.recompute / GB_MIN,
            stall_gb_min: w.stall / GB_MIN,
            total_gb_min: w.total() / GB_MIN,
            preserve_pct: pct(w.preserve),
            recompute_pct: pct(w.recompute),
            stall_pct: pct(w.stall),
            total_pct: pct(w.total()),
            recompute_fraction: if self.forward_time > 0.0 {
                self.recompute_time / self.forward_time
            } else {
                0.0
            },
        }
    }

    pub fn summary(&self) -> Summary {
        let completed = self.completed().count();
        Summary {
            requests: self.requests.len(),
            completed,
            incomplete: self.requests.iter().filter(|r| r.incomplete).count(),
            normalized_latency: self.normalized_latency().ok(),
            throughput: self.throughput(None),
            ttft: self.ttft().ok(),
            waste: self.waste_report(),
            sim_end: self.sim_end,
            iterations: self.iterations,
        }
    }

    pub fn write_requests_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "id",
            "class",
            "arrival",
            "ttft",
            "completion",
            "output_tokens",
            "interception_time",
            "norm_latency",
        ])?;
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.requests {
            w.write_record([
                r.id.to_string(),
                r.class.clone(),
                r.arrival.to_string(),
                opt(r.ttft()),
                opt(r.completion),
                r.output_tokens.to_string(),
                r.total_interception_time.to_string(),
                opt(r.normalized_latency()),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save_requests_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_requests_csv(std::io::BufWriter::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u64, arrival: f64, first: f64, done: f64, out: u64, int: f64) -> RequestRecord {
        RequestRecord {
            id,
            class: "plain".into(),
            arrival,
            first_token_time: Some(first),
            completion: Some(done),
            output_tokens: out,
            total_interception_time: int,
            incomplete: false,
            preserve_waste: 0.0,
        }
    }

    #[test]
    fn normalized_latency_examples() {
        let one = MetricsLedger {
            requests: vec![rec(1, 0.0, 0.141, 10.33, 11, 10.0)],
            ..Default::default()
        };
        assert!((one.normalized_latency().unwrap() - 0.03).abs() < 1e-12);

        let two = MetricsLedger {
            requests: vec![rec(1, 0.0, 0.1, 0.2, 10, 0.0), rec(2, 0.0, 0.1, 0.4, 10, 0.0)],
            ..Default::default()
        };
        assert!((two.normalized_latency().unwrap() - 0.03).abs() < 1e-12);

        let mut zero_out = two.clone();
        zero_out.requests.push(rec(3, 0.0, 0.1, 50.0, 0, 0.0));
        assert!((zero_out.normalized_latency().unwrap() - 0.03).abs() < 1e-12);

        assert!(matches!(
            MetricsLedger::default().normalized_latency(),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn throughput_examples() {
        let mut m = MetricsLedger::default();
        assert_eq!(m.throughput(None), 0.0);
        m.requests = (0..100).map(|i| rec(i, 0.0, 0.1, 0.5 * (i + 1) as f64, 1, 0.0)).collect();
        assert_eq!(m.throughput(None), 2.0);
        assert_eq!(m.throughput(Some(25.0)), 4.0);
    }

    #[test]
    fn ttft_examples() {
        let mut m = MetricsLedger::default();
        assert!(m.ttft().is_err());
        m.requests = vec![rec(1, 1.0, 1.5, 2.0, 1, 0.0)];
        assert_eq!(m.ttft().unwrap(), 0.5);
        m.requests.push(rec(2, 0.0, 1.5, 2.0, 1, 0.0));
        assert_eq!(m.ttft().unwrap(), 1.0);
    }

    #[test]
    fn empty_waste_report_is_zero() {
        let r = MetricsLedger::default().waste_report();
        assert_eq!(r.total_gb_min, 0.0);
        assert_eq!(r.total_pct, 0.0);
        assert_eq!(r.recompute_fraction, 0.0);
    }

    #[test]
    fn buckets_sum_to_total() {
        let m = MetricsLedger {
            waste: WasteBuckets {
                preserve: 6e10,
                recompute: 1.2e11,
                stall: 0.0,
            },
            gpu_capacity: 1e10,
            sim_end: 100.0,
            ..Default::default()
        };
        let r = m.waste_report();
        assert!((r.total_gb_min - 3.0).abs() < 1e-12);
        assert!((r.preserve_pct + r.recompute_pct + r.stall_pct - r.total_pct).abs() < 1e-12);
        assert!((r.total_pct - 18.0).abs() < 1e-12);
    }

    #[test]
    fn shifting_arrivals_keeps_latency() {
        let base = MetricsLedger {
            requests: vec![rec(1, 0.0, 0.1, 0.3, 7, 0.0), rec(2, 0.5, 0.7, 2.0, 3, 1.0)],
            ..Default::default()
        };
        let mut shifted = base.clone();
        for r in &mut shifted.requests {
            r.arrival += 1000.0;
            r.first_token_time = r.first_token_time.map(|t| t + 1000.0);
            r.completion = r.completion.map(|t| t + 1000.0);
        }
        let a = base.normalized_latency().unwrap();
        let b = shifted.normalized_latency().unwrap();
        assert!((a - b).abs() < 1e-9);
    }
}
