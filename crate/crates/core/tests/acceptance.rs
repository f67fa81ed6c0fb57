//! Acceptance criteria 1-9. Prints one line per criterion and exits nonzero
//! if any fails.

use std::collections::BTreeMap;
use std::time::Instant;

use intercept_core::engine::SimOutput;
use intercept_core::experiment::{rate_at_latency, run_sweep, write_sweep_csv, CellResult, Variant};
use intercept_core::metrics::Summary;
use intercept_core::policy::{allocate_swap_budget, compute_swap_limit};
use intercept_core::waste::{
    decide, waste_chunk_discard, waste_discard_oneshot, waste_preserve, waste_swap_naive, Decision,
};
use intercept_core::workload::{generate_trace, rescale_arrivals, GenSpec, Interception, Segment};
use intercept_core::{run, ClassName, CostModel, EstimatorMode, PolicyKind, Request, SimConfig, Techniques};

const SEED: u64 = 7;
const REQUESTS: usize = 2000;
const BASE_RATE: f64 = 1.0;
const RATES: [f64; 5] = [0.5, 1.0, 2.0, 4.0, 8.0];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rel_err(got: f64, want: f64) -> f64 {
    if want == 0.0 {
        got.abs()
    } else {
        ((got - want) / want).abs()
    }
}

/// t_fwd(x) = 0.001 x with no fixed cost and no knee.
fn linear(mem_per_token: f64) -> CostModel {
    CostModel {
        t0: 0.0,
        slope_below: 1e-3,
        slope_above: 1e-3,
        saturation_point: 1 << 30,
        mem_per_token,
        ..CostModel::synthetic()
    }
}

const MB: f64 = 1e6;

fn criterion_1() -> Outcome {
    let syn = CostModel::synthetic();
    let m08 = linear(0.8 * MB);
    let m1 = linear(MB);
    let chatbot = decide(&m08, 28.6, 753, 5000, 1);
    // Hand-evaluated values, in bytes or seconds.
    let checks: Vec<(&str, f64, f64)> = vec![
        ("preserve 10 s x 1000 tok", waste_preserve(&syn, 10.0, 1000), 8000.0 * MB),
        ("preserve Math means", waste_preserve(&syn, 9e-5, 1422), 0.102384 * MB),
        ("discard one-shot", waste_discard_oneshot(&m1, 1000, 5000), 6000.0 * MB),
        ("naive swap", waste_swap_naive(&m1, 1000, 6000), 600.0 * MB),
        ("chunked discard n=4", waste_chunk_discard(&m1, 1000, 5000, 250), 5500.0 * MB),
        ("chatbot preserve", chatbot.preserve, 17228.64 * MB),
        ("chatbot chunked discard", chatbot.chunk_discard, 3238.8036 * MB),
        ("t_fwd(S)", syn.t_fwd(2048.0), 0.04048),
        ("t_fwd(S+1000)", syn.t_fwd(3048.0), 0.07048),
        ("t_swap(600)", syn.t_swap(600.0), 0.03),
        ("swap limit B=1000", compute_swap_limit(&syn, 1000) as f64, 600.0),
        ("swap limit B=0", compute_swap_limit(&syn, 0) as f64, 400.0),
    ];
    let budget = allocate_swap_budget(600, 200, 1000, 300, 10000, u64::MAX);
    let ns = budget.schedulable(300, u64::MAX);
    let mut worst = 0.0f64;
    let mut bad = Vec::new();
    for (name, got, want) in &checks {
        let e = rel_err(*got, *want);
        worst = worst.max(e);
        if e > 1e-12 {
            bad.push(format!("{name}: {got} vs {want}"));
        }
    }
    if (budget.alloc_in, budget.alloc_out, ns) != (200, 400, 500) {
        bad.push(format!("budget {budget:?} ns {ns}"));
    }
    if chatbot.decision != Decision::Discard {
        bad.push("chatbot decision".into());
    }
    let math = decide(&syn, 9e-5, 1422, 5000, 1024);
    if math.decision != Decision::Preserve {
        bad.push("math decision".into());
    }
    outcome(
        bad.is_empty(),
        format!(
            "{} closed-form values, worst relative error {worst:.1e}{}",
            checks.len() + 3,
            if bad.is_empty() { String::new() } else { format!("; {}", bad.join("; ")) }
        ),
    )
}

struct Sweep {
    trace: Vec<Request>,
    model: CostModel,
    cells: Vec<CellResult>,
    seconds: f64,
}

impl Sweep {
    fn cell(&self, rate: f64, policy: PolicyKind) -> &Summary {
        &self
            .cells
            .iter()
            .find(|c| c.rate == rate && c.label == policy.as_str())
            .expect("cell exists")
            .summary
    }

    fn latency(&self, rate: f64, policy: PolicyKind) -> f64 {
        self.cell(rate, policy).normalized_latency.unwrap_or(f64::INFINITY)
    }

    /// Lowest tested rate at which vanilla discard's latency has at least
    /// doubled from its low-load value.
    fn saturating_rate(&self) -> f64 {
        let low = self.latency(RATES[0], PolicyKind::VanillaDiscard);
        RATES
            .into_iter()
            .find(|&r| self.latency(r, PolicyKind::VanillaDiscard) >= 2.0 * low)
            .unwrap_or(RATES[RATES.len() - 1])
    }

    fn trace_at(&self, rate: f64) -> Vec<Request> {
        rescale_arrivals(&self.trace, BASE_RATE, rate)
    }
}

fn policy_variants() -> Vec<Variant> {
    PolicyKind::ALL
        .into_iter()
        .map(|p| Variant {
            label: p.as_str().into(),
            config: SimConfig::for_policy(p),
        })
        .collect()
}

fn sweep() -> Sweep {
    let trace = generate_trace(&GenSpec::mixed(REQUESTS, BASE_RATE, SEED)).unwrap();
    let model = CostModel::synthetic();
    let start = Instant::now();
    let cells = run_sweep(&trace, BASE_RATE, &RATES, &policy_variants(), &model, None).unwrap();
    Sweep {
        trace,
        model,
        cells,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn criterion_2(s: &Sweep) -> Outcome {
    let low = s.latency(RATES[0], PolicyKind::InferCept);
    let best = RATES
        .into_iter()
        .filter(|&r| s.latency(r, PolicyKind::InferCept) < 2.0 * low)
        .fold(f64::NAN, f64::max);
    let target = s.latency(best, PolicyKind::InferCept);
    let vanilla: Vec<(f64, f64)> = RATES
        .into_iter()
        .map(|r| (r, s.latency(r, PolicyKind::VanillaDiscard)))
        .collect();
    let vanilla_rate = rate_at_latency(&vanilla, target);
    let ratio = vanilla_rate.map_or(f64::INFINITY, |v| best / v);

    let mut inversions: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in RATES {
        let ours = s.latency(r, PolicyKind::InferCept);
        for p in PolicyKind::ALL.into_iter().filter(|&p| p != PolicyKind::InferCept) {
            if ours > s.latency(r, p) {
                inversions.entry(p.as_str()).or_default().push(r);
            }
        }
    }
    let ordering_ok = inversions
        .iter()
        .all(|(p, rates)| *p == PolicyKind::Preserve.as_str() && rates.len() <= 1);
    let pass = ratio >= 1.3 && ordering_ok && s.seconds <= 120.0;
    outcome(
        pass,
        format!(
            "sustained rate {best} vs vanilla {} at {target:.4} s/token (ratio {ratio:.2}, need >= 1.3); \
             inversions {inversions:?}; sweep took {:.1} s",
            vanilla_rate.map_or("never".to_string(), |v| format!("{v:.2}")),
            s.seconds
        ),
    )
}

fn criterion_3(s: &Sweep) -> Outcome {
    let rate = s.saturating_rate();
    let rf = s.cell(rate, PolicyKind::VanillaDiscard).waste.recompute_fraction;
    outcome(
        (0.25..=0.55).contains(&rf),
        format!("vanilla recompute fraction {rf:.3} at saturating rate {rate} (need [0.25, 0.55])"),
    )
}

fn criterion_4(s: &Sweep) -> Outcome {
    let rate = s.saturating_rate();
    let trace = s.trace_at(rate);
    let config = SimConfig {
        record_iterations: true,
        ..SimConfig::for_policy(PolicyKind::InferCept)
    };
    let out = run(&trace, &s.model, &config).unwrap();
    let mut bad_duration = 0usize;
    let mut over_limit = 0usize;
    let mut swapped = 0u64;
    for it in &out.iterations {
        if it.d != s.model.t_fwd(it.batch_tokens as f64) || it.stall != 0.0 {
            bad_duration += 1;
        }
        if it.swap_in + it.swap_out > compute_swap_limit(&s.model, it.batch_tokens) {
            over_limit += 1;
        }
        swapped += it.swap_in + it.swap_out;
    }
    let naive = run(&trace, &s.model, &SimConfig::for_policy(PolicyKind::NaiveSwap)).unwrap();
    let stall = naive.metrics.stall_time;
    outcome(
        bad_duration == 0 && over_limit == 0 && swapped > 0 && stall > 0.0,
        format!(
            "{} iterations at rate {rate}: {bad_duration} with d != t_fwd(B), {over_limit} over the swap limit, \
             {swapped} tokens swapped; naive swap stall {stall:.1} s",
            out.iterations.len()
        ),
    )
}

fn run_summary(trace: &[Request], model: &CostModel, config: &SimConfig) -> Summary {
    run(trace, model, config).unwrap().metrics.summary()
}

fn criterion_5(s: &Sweep) -> Outcome {
    let rate = s.saturating_rate();
    let trace = s.trace_at(rate);
    let waste: Vec<(&str, f64)> = Techniques::ladder()
        .into_iter()
        .map(|(label, t)| {
            let pct = match PolicyKind::ALL.into_iter().find(|p| p.techniques() == t) {
                Some(p) => s.cell(rate, p).waste.total_pct,
                None => run_summary(&trace, &s.model, &SimConfig::with_techniques(t)).waste.total_pct,
            };
            (label, pct)
        })
        .collect();
    let monotone = waste.windows(2).all(|w| w[1].1 <= w[0].1);
    let ratio = waste[waste.len() - 1].1 / waste[0].1;
    let steps: Vec<String> = waste.iter().map(|(l, w)| format!("{l} {w:.2}%")).collect();
    outcome(
        monotone && ratio < 0.2,
        format!(
            "at rate {rate}: {}; full/vanilla {ratio:.3} (need < 0.2), nonincreasing: {monotone}",
            steps.join(" > ")
        ),
    )
}

fn criterion_6(s: &Sweep) -> Outcome {
    let rate = s.saturating_rate();
    let trace = s.trace_at(rate);
    let oracle = s.latency(rate, PolicyKind::InferCept);
    let config = SimConfig {
        estimator: EstimatorMode::Dynamic,
        ..SimConfig::for_policy(PolicyKind::InferCept)
    };
    let dynamic = run_summary(&trace, &s.model, &config).normalized_latency.unwrap_or(f64::INFINITY);
    let ratio = dynamic / oracle;
    outcome(
        ratio <= 1.2,
        format!("at rate {rate}: dynamic {dynamic:.4} vs oracle {oracle:.4} s/token, ratio {ratio:.3} (need <= 1.2)"),
    )
}

/// Checks every fully preserved request: realized preserve waste lies in
/// `[sum t_int x bytes, sum (t_int + d_end) x bytes]`, where `d_end` is the
/// duration of the iteration running when the interception ends.
fn preserve_identity(trace: &[Request], model: &CostModel, out: &SimOutput) -> (usize, f64, Vec<String>) {
    let by_id: BTreeMap<u64, &Request> = trace.iter().map(|r| (r.id, r)).collect();
    let mut per_request: BTreeMap<u64, Vec<_>> = BTreeMap::new();
    for d in &out.decisions {
        per_request.entry(d.id).or_default().push(d);
    }
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    let mut bad = Vec::new();
    for rec in &out.metrics.requests {
        let Some(decisions) = per_request.get(&rec.id) else { continue };
        if decisions.iter().any(|d| d.preserved != d.context) {
            continue;
        }
        let req = by_id[&rec.id];
        let mut expected = 0.0;
        let mut slack = 0.0;
        for d in decisions {
            let t_int = req.segments[d.interception].interception.as_ref().unwrap().duration;
            let bytes = model.tokens_to_bytes(d.context);
            let end = d.t_call + t_int;
            let d_end = out
                .iterations
                .iter()
                .find(|it| it.t < end && end < it.t + it.d)
                .map_or(0.0, |it| it.d);
            expected += t_int * bytes;
            slack += d_end * bytes;
        }
        let excess = rec.preserve_waste - expected;
        if excess < -1e-9 * expected.max(1.0) || excess > slack + 1e-9 * expected.max(1.0) {
            bad.push(format!("request {}: {} vs {expected} + [0, {slack}]", rec.id, rec.preserve_waste));
        }
        if slack > 0.0 {
            worst = worst.max(excess / slack);
        }
        checked += 1;
    }
    (checked, worst, bad)
}

fn criterion_7(s: &Sweep) -> Outcome {
    // One paused request on an otherwise idle Preserve system.
    let single = vec![Request {
        id: 0,
        arrival: 0.0,
        prompt_tokens: 1000,
        segments: vec![
            Segment {
                decode_tokens: 7,
                interception: Some(Interception {
                    kind: ClassName::QA,
                    duration: 3.3,
                    return_tokens: 0,
                }),
            },
            Segment {
                decode_tokens: 5,
                interception: None,
            },
        ],
    }];
    let traced = SimConfig {
        record_iterations: true,
        ..SimConfig::for_policy(PolicyKind::Preserve)
    };
    let lone = run(&single, &s.model, &traced).unwrap();
    let (n1, _, mut bad) = preserve_identity(&single, &s.model, &lone);
    let lone_bucket = lone.metrics.waste.preserve;
    let lone_expected = 3.3 * s.model.tokens_to_bytes(1007);
    if rel_err(lone_bucket, lone_expected) > 1e-9 {
        bad.push(format!("lone preserve bucket {lone_bucket} vs {lone_expected}"));
    }

    // Mixed InferCept run with no host memory, so nothing is swapped.
    let no_cpu = CostModel {
        cpu_kv_capacity: 1.0,
        ..s.model.clone()
    };
    let trace = s.trace_at(s.saturating_rate());
    let config = SimConfig {
        record_iterations: true,
        ..SimConfig::for_policy(PolicyKind::InferCept)
    };
    let out = run(&trace, &no_cpu, &config).unwrap();
    let (n2, worst, more) = preserve_identity(&trace, &no_cpu, &out);
    bad.extend(more);
    outcome(
        bad.is_empty() && n1 == 1 && n2 > 0,
        format!(
            "{} preserved requests within one end-iteration of t_int x bytes (largest excess {:.2} of the slack){}",
            n1 + n2,
            worst,
            if bad.is_empty() { String::new() } else { format!("; {}", bad[..bad.len().min(3)].join("; ")) }
        ),
    )
}

fn criterion_8() -> Outcome {
    let csv = |threads: Option<usize>| {
        let trace = generate_trace(&GenSpec::mixed(300, BASE_RATE, SEED)).unwrap();
        let cells = run_sweep(&trace, BASE_RATE, &RATES, &policy_variants(), &CostModel::synthetic(), threads)
            .unwrap();
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &cells).unwrap();
        buf
    };
    let a = csv(None);
    let b = csv(Some(1));
    outcome(
        a == b && !a.is_empty(),
        format!("two 25-cell sweeps of 300 requests: {} bytes, identical: {}", a.len(), a == b),
    )
}

fn criterion_9() -> Outcome {
    let model = CostModel {
        t0: 0.02,
        slope_below: 1e-3,
        slope_above: 1e-3,
        saturation_point: 1 << 30,
        ..CostModel::synthetic()
    };
    let request = |interception: Option<f64>| Request {
        id: 0,
        arrival: 0.0,
        prompt_tokens: 100,
        segments: match interception {
            None => vec![Segment {
                decode_tokens: 10,
                interception: None,
            }],
            Some(duration) => vec![
                Segment {
                    decode_tokens: 5,
                    interception: Some(Interception {
                        kind: ClassName::QA,
                        duration,
                        return_tokens: 0,
                    }),
                },
                Segment {
                    decode_tokens: 5,
                    interception: None,
                },
            ],
        },
    };
    let traced = |p| SimConfig {
        record_iterations: true,
        ..SimConfig::for_policy(p)
    };
    let mut worst = 0.0f64;
    let mut check = |got: f64, want: f64| worst = worst.max((got - want).abs());

    // Prefill of 100 tokens, then ten 1-token decodes.
    let mut starts = vec![0.0];
    starts.extend((0..10).map(|k| 0.12 + 0.021 * k as f64));
    for p in PolicyKind::ALL {
        let out = run(&[request(None)], &model, &traced(p)).unwrap();
        let r = &out.metrics.requests[0];
        check(r.completion.unwrap(), 0.33);
        check(r.first_token_time.unwrap(), 0.141);
        check(out.iterations.len() as f64, starts.len() as f64);
        for (it, want) in out.iterations.iter().zip(&starts) {
            check(it.t, *want);
        }
    }

    // Five decodes, a 5 s preserved interception, five more decodes.
    let out = run(&[request(Some(5.0))], &model, &traced(PolicyKind::Preserve)).unwrap();
    let r = &out.metrics.requests[0];
    check(r.completion.unwrap(), 0.12 + 10.0 * 0.021 + 5.0);
    check(r.first_token_time.unwrap(), 0.141);
    check(r.total_interception_time, 5.0);
    let resumed = out.iterations.iter().find(|it| it.t > 1.0).map_or(f64::NAN, |it| it.t);
    check(resumed, 0.225 + 5.0);

    // Empty trace.
    let empty = run(&[], &model, &SimConfig::default()).unwrap();
    let empty_ok = empty.metrics.requests.is_empty() && empty.metrics.waste.total() == 0.0;

    outcome(
        worst <= 1e-9 && empty_ok,
        format!("largest timestamp error {worst:.1e} s over the hand-traced runs; empty trace ok: {empty_ok}"),
    )
}

fn main() {
    let mut results: Vec<(u32, Outcome)> = vec![(1, criterion_1())];
    let s = sweep();
    results.push((2, criterion_2(&s)));
    results.push((3, criterion_3(&s)));
    results.push((4, criterion_4(&s)));
    results.push((5, criterion_5(&s)));
    results.push((6, criterion_6(&s)));
    results.push((7, criterion_7(&s)));
    results.push((8, criterion_8()));
    results.push((9, criterion_9()));

    for (n, o) in &results {
        println!("criterion {n}: {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<u32> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    if failed.is_empty() {
        println!("acceptance: all criteria pass");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
