use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn sim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_intercept-sim"))
        .current_dir(dir)
        .env_remove("INTERCEPT_SIM_THREADS")
        .args(args)
        .output()
        .expect("spawn intercept-sim")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn invalid_policy_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = sim(dir.path(), &["run", "--policy", "round-robin"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = sim(dir.path(), &["run", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_trace_is_a_file_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = sim(dir.path(), &["run", "--trace", "nope.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.jsonl"));
}

#[test]
fn help_lists_every_run_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = sim(dir.path(), &["run", "--help"]);
    ok(&out);
    let help = String::from_utf8_lossy(&out.stdout);
    for flag in [
        "--trace",
        "--model",
        "--policy",
        "--duration-estimator",
        "--seed",
        "--config",
        "--event-log",
        "--dump-ledger-every",
        "--out-dir",
        "--decisions",
    ] {
        assert!(help.contains(flag), "{flag} missing from help");
    }
}

#[test]
fn gen_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for name in ["a.jsonl", "b.jsonl"] {
        ok(&sim(d, &["gen", "--requests", "300", "--seed", "11", "-o", name]));
    }
    ok(&sim(d, &["gen", "--requests", "300", "--seed", "12", "-o", "c.jsonl"]));
    let a = std::fs::read(d.join("a.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b.jsonl")).unwrap());
    assert_ne!(a, std::fs::read(d.join("c.jsonl")).unwrap());
    let stats: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("a.stats.json")).unwrap()).unwrap();
    assert!(stats["empirical"].as_array().unwrap().len() >= 6);
    assert!(!stats["reference"].as_array().unwrap().is_empty());
}

#[test]
fn zero_variance_class_from_config_has_constant_durations() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = serde_json::json!({
        "gen": {
            "mixture": [{
                "class": {
                    "type": "intercepting",
                    "name": "Math",
                    "duration_mean": 9e-5,
                    "duration_var": 0.0,
                    "count_mean": 3.75,
                    "count_var": 1.3,
                    "context_mean": 1422.0,
                    "context_var": 738.0,
                    "return_tokens_mean": 20.0
                },
                "weight": 1.0
            }],
            "request_count": 100,
            "arrival_rate": 1.0,
            "seed": 5
        }
    });
    std::fs::write(d.join("cfg.json"), config.to_string()).unwrap();
    ok(&sim(d, &["--config", "cfg.json", "gen", "-o", "m.jsonl"]));
    let stats: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("m.stats.json")).unwrap()).unwrap();
    let math = &stats["empirical"][0];
    assert_eq!(math["class"], "Math");
    assert!((math["duration"]["mean"].as_f64().unwrap() - 9e-5).abs() < 1e-15);
    assert!(math["duration"]["var"].as_f64().unwrap().abs() < 1e-20);
}

#[test]
fn smoke_run_writes_outputs_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&sim(d, &["gen", "--requests", "50", "--seed", "2", "-o", "t.jsonl"]));
    let start = Instant::now();
    let out = sim(
        d,
        &[
            "run",
            "--trace",
            "t.jsonl",
            "--policy",
            "infercept",
            "--duration-estimator",
            "dynamic",
            "--out-dir",
            "o",
            "--event-log",
            "ev.jsonl",
            "--decisions",
            "dec.csv",
            "--dump-ledger-every",
            "50",
            "--check-invariants",
        ],
    );
    ok(&out);
    assert!(start.elapsed().as_secs_f64() < 5.0);

    let csv = std::fs::read_to_string(d.join("o/requests.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "id,class,arrival,ttft,completion,output_tokens,interception_time,norm_latency"
    );
    assert_eq!(lines.count(), 50);

    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("o/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["policy"], "infercept");
    assert_eq!(summary["config"]["sim"]["estimator"], "dynamic");
    assert_eq!(summary["summary"]["completed"], 50);

    let events = std::fs::read_to_string(d.join("ev.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(events.lines().next().unwrap()).unwrap();
    for key in ["it", "t", "B", "d", "swap_in", "swap_out", "events"] {
        assert!(first.get(key).is_some(), "event record lacks {key}");
    }
    assert!(d.join("o/ledger.jsonl").exists());
    assert!(std::fs::read_to_string(d.join("dec.csv")).unwrap().starts_with("id,interception,"));
}

#[test]
fn sweep_covers_every_cell_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = |out: &'static str| {
        vec![
            "--seed",
            "4",
            "sweep",
            "--requests",
            "120",
            "--rates",
            "0.5,1,2,4,8",
            "-o",
            out,
        ]
    };
    ok(&sim(d, &args("s1.csv")));
    let out = Command::new(env!("CARGO_BIN_EXE_intercept-sim"))
        .current_dir(d)
        .env("INTERCEPT_SIM_THREADS", "1")
        .args(args("s2.csv"))
        .output()
        .unwrap();
    ok(&out);
    let a = std::fs::read_to_string(d.join("s1.csv")).unwrap();
    assert_eq!(a, std::fs::read_to_string(d.join("s2.csv")).unwrap());
    let mut lines = a.lines();
    assert_eq!(lines.next().unwrap(), "rate,policy,norm_latency,throughput,ttft,waste_pct");
    assert_eq!(lines.count(), 25);

    let report = sim(d, &["report", "s1.csv", "-o", "merged.csv"]);
    ok(&report);
    assert!(String::from_utf8_lossy(&report.stdout).contains("infercept"));
    assert!(d.join("merged.csv").exists());
}

#[test]
fn profile_fits_and_reports_knee() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut points = String::from("batch_tokens,seconds\n");
    for x in (64..=4096).step_by(64) {
        let x = x as f64;
        let y = if x <= 1024.0 {
            0.02 + 1e-5 * x
        } else {
            0.02 + 1e-5 * 1024.0 + 4e-5 * (x - 1024.0)
        };
        points.push_str(&format!("{x},{y}\n"));
    }
    std::fs::write(d.join("p.csv"), points).unwrap();
    let out = sim(d, &["profile", "p.csv", "-o", "m.json"]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("saturation point: 1024"));
    let model: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("m.json")).unwrap()).unwrap();
    assert_eq!(model["saturation_point"], 1024);

    ok(&sim(d, &["gen", "--requests", "20", "-o", "t.jsonl"]));
    ok(&sim(d, &["run", "--trace", "t.jsonl", "--model", "m.json", "--out-dir", "o"]));
}

#[test]
fn trace_and_generation_flags_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&sim(d, &["gen", "--requests", "5", "-o", "t.jsonl"]));
    let out = sim(d, &["run", "--trace", "t.jsonl", "--requests", "5"]);
    assert_eq!(out.status.code(), Some(1));
}
