//! Offline-profiled performance functions.
//!
//! Iteration latency is a two-piece linear function of the number of query
//! tokens in the batch: a shallow slope up to the saturation point `S`, where
//! the GPU's compute is fully used, and a steeper one beyond it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_swap_launch_overhead() -> f64 {
    0.002
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Fixed per-iteration overhead, seconds.
    pub t0: f64,
    /// Seconds per query token up to the saturation point.
    pub slope_below: f64,
    /// Seconds per query token beyond the saturation point.
    pub slope_above: f64,
    /// Saturation point `S`, in query tokens.
    pub saturation_point: u64,
    /// Seconds to move one token's KV between GPU and host.
    pub swap_per_token: f64,
    /// KV bytes per token (`M`).
    pub mem_per_token: f64,
    pub gpu_kv_capacity: f64,
    pub cpu_kv_capacity: f64,
    pub block_size: u64,
    /// Fixed cost of an unpipelined, synchronous swap.
    #[serde(default = "default_swap_launch_overhead")]
    pub swap_launch_overhead: f64,
}

impl CostModel {
    /// Default synthetic deployment: 0.8 MB of fp16 KV per token (40 layers
    /// x 5120 hidden), 48 GiB of KV space, a 16 GB/s host link, and a
    /// compute knee at 2048 query tokens.
    pub fn synthetic() -> Self {
        let mem_per_token = 0.8e6;
        let gpu_kv_capacity = 48.0 * (1u64 << 30) as f64;
        CostModel {
            t0: 0.020,
            slope_below: 1.0e-5,
            slope_above: 3.0e-5,
            saturation_point: 2048,
            swap_per_token: mem_per_token / 16.0e9,
            mem_per_token,
            gpu_kv_capacity,
            cpu_kv_capacity: 4.0 * gpu_kv_capacity,
            block_size: 16,
            swap_launch_overhead: default_swap_launch_overhead(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.t0.is_finite()
            && self.t0 >= 0.0
            && self.slope_below > 0.0
            && self.slope_below <= self.slope_above
            && self.slope_above.is_finite()
            && self.saturation_point > 0
            && self.swap_per_token > 0.0
            && self.mem_per_token > 0.0
            && self.mem_per_token.is_finite()
            && self.gpu_kv_capacity > 0.0
            && self.cpu_kv_capacity > 0.0
            && self.block_size >= 1
            && self.swap_launch_overhead >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "cost model violates its invariants: {self:?}"
            )))
        }
    }

    /// Iteration latency for a batch of `batch_tokens` query tokens.
    /// Fractional token counts are accepted for closed-form estimates.
    pub fn t_fwd(&self, batch_tokens: f64) -> f64 {
        let s = self.saturation_point as f64;
        if batch_tokens <= s {
            self.t0 + self.slope_below * batch_tokens
        } else {
            self.t0 + self.slope_below * s + self.slope_above * (batch_tokens - s)
        }
    }

    pub fn t_swap(&self, tokens: f64) -> f64 {
        tokens * self.swap_per_token
    }

    /// Bytes a paged allocation of `tokens` occupies.
    pub fn tokens_to_bytes(&self, tokens: u64) -> f64 {
        (self.blocks_for(tokens) * self.block_size) as f64 * self.mem_per_token
    }

    pub fn blocks_for(&self, tokens: u64) -> u64 {
        tokens.div_ceil(self.block_size)
    }

    pub fn bytes_per_block(&self) -> f64 {
        self.block_size as f64 * self.mem_per_token
    }

    /// Whole blocks that fit in `bytes`.
    pub fn capacity_blocks(&self, bytes: f64) -> u64 {
        // Tolerate capacities computed as blocks * bytes_per_block in floats.
        (bytes / self.bytes_per_block() * (1.0 + 1e-12)).floor() as u64
    }

    pub fn with_fit(&self, fit: &ProfileFit) -> CostModel {
        CostModel {
            t0: fit.t0,
            slope_below: fit.slope_below,
            slope_above: fit.slope_above,
            saturation_point: fit.saturation_point,
            ..self.clone()
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: CostModel = serde_json::from_str(&text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// The latency half of a [`CostModel`] recovered from profiling points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileFit {
    pub t0: f64,
    pub slope_below: f64,
    pub slope_above: f64,
    pub saturation_point: u64,
    pub residual: f64,
}

/// Least-squares fit of a continuous two-piece linear latency curve.
///
/// Every observed batch size (except the smallest) is tried as the knee; for
/// each, `t0`, `slope_below` and `slope_above` are solved by least squares and
/// the knee with the smallest squared residual wins. A knee at the largest
/// observed x leaves no points above it, and the upper slope is then taken to
/// equal the lower one.
pub fn fit_profile(points: &[(f64, f64)]) -> Result<ProfileFit> {
    if points.len() < 4 {
        return Err(Error::Fit(format!(
            "need at least 4 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|(x, y)| !(x.is_finite() && y.is_finite() && *x >= 0.0)) {
        return Err(Error::Fit("points must be finite with non-negative x".into()));
    }
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < 2 {
        return Err(Error::Fit("all batch sizes are equal".into()));
    }
    let scale = xs.last().copied().unwrap_or(1.0).max(1.0);

    let mut best: Option<ProfileFit> = None;
    for &knee in &xs[1..] {
        let has_upper = points.iter().any(|p| p.0 > knee);
        let Some(coef) = solve_hinge(points, knee, scale, has_upper) else {
            continue;
        };
        let (t0, b1, b2) = coef;
        let residual: f64 = points
            .iter()
            .map(|&(x, y)| {
                let pred = t0 + b1 * x.min(knee) + b2 * (x - knee).max(0.0);
                (pred - y).powi(2)
            })
            .sum();
        if best.as_ref().is_none_or(|b| residual < b.residual) {
            best = Some(ProfileFit {
                t0,
                slope_below: b1,
                slope_above: b2,
                saturation_point: knee.round() as u64,
                residual,
            });
        }
    }
    best.ok_or_else(|| Error::Fit("no candidate knee produced a solvable system".into()))
}

/// Least squares on features [1, min(x,k), max(0,x-k)] (scaled by `scale`
/// for conditioning). Without upper points the third feature is dropped and
/// its slope copied from the second.
fn solve_hinge(points: &[(f64, f64)], knee: f64, scale: f64, has_upper: bool) -> Option<(f64, f64, f64)> {
    let dim = if has_upper { 3 } else { 2 };
    let mut ata = [[0.0f64; 3]; 3];
    let mut atb = [0.0f64; 3];
    for &(x, y) in points {
        let f = [1.0, x.min(knee) / scale, (x - knee).max(0.0) / scale];
        for i in 0..dim {
            for j in 0..dim {
                ata[i][j] += f[i] * f[j];
            }
            atb[i] += f[i] * y;
        }
    }
    let sol = gauss_solve(ata, atb, dim)?;
    let b1 = sol[1] / scale;
    let b2 = if has_upper { sol[2] / scale } else { b1 };
    Some((sol[0], b1, b2))
}

fn gauss_solve(mut a: [[f64; 3]; 3], mut b: [f64; 3], n: usize) -> Option<[f64; 3]> {
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            let pivot_row = a[col];
            for (x, p) in a[row][col..n].iter_mut().zip(&pivot_row[col..n]) {
                *x -= f * p;
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    Some(x)
}

/// Reads `batch_tokens,seconds` rows (a header row is optional).
pub fn load_profile_points(path: impl AsRef<Path>) -> Result<Vec<(f64, f64)>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut points = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record?;
        let parse = |i: usize| record.get(i).and_then(|s| s.parse::<f64>().ok());
        match (parse(0), parse(1)) {
            (Some(x), Some(y)) => points.push((x, y)),
            // A non-numeric first row is a header.
            _ if idx == 0 => continue,
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    message: "expected `batch_tokens,seconds`".into(),
                })
            }
        }
    }
    Ok(points)
}
