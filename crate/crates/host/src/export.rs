//! Report files: `report.json`, `trace.jsonl`, `metrics.csv`, plus sweep and
//! bench tables. Every writer is deterministic in its input.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use vpc_core::hash::Digest256;
use vpc_core::harness::bench::{BenchReport, Comparison};
use vpc_core::harness::metrics::Metrics;
use vpc_core::harness::{ClusterTrace, ScenarioRun, SweepReport};
use vpc_core::wire::FrameProfile;

pub const REPORT: &str = "report.json";
pub const TRACE: &str = "trace.jsonl";
pub const METRICS: &str = "metrics.csv";

/// One JSON object per event, then one per final node state.
pub fn trace_jsonl(trace: &ClusterTrace) -> String {
    let mut out = String::new();
    for e in &trace.events {
        out.push_str(&serde_json::to_string(e).expect("events serialize"));
        out.push('\n');
    }
    for (node, s) in &trace.final_states {
        #[derive(Serialize)]
        struct Final<'a, S> {
            kind: &'static str,
            node: vpc_core::model::NodeId,
            #[serde(flatten)]
            state: &'a S,
        }
        out.push_str(&serde_json::to_string(&Final { kind: "final_state", node: *node, state: s }).expect("states serialize"));
        out.push('\n');
    }
    out
}

fn flatten(prefix: &str, v: &Value, rows: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}_{k}") };
                flatten(&key, v, rows);
            }
        }
        Value::Null => rows.push((prefix.to_string(), String::new())),
        other => rows.push((prefix.to_string(), other.to_string())),
    }
}

/// `metric,value` rows; nested fields are joined with `_`, absent values
/// are empty.
pub fn metrics_csv(m: &Metrics) -> String {
    let mut rows = Vec::new();
    flatten("", &serde_json::to_value(m).expect("metrics serialize"), &mut rows);
    let mut out = String::from("metric,value\n");
    for (k, v) in rows {
        let _ = writeln!(out, "{k},{v}");
    }
    out
}

pub fn sweep_csv(r: &SweepReport) -> String {
    let mut out = String::from("fault_at_us,seed,violations,detection_us,max_actuator_gap_us,missed_control_cycles,self_promotions\n");
    for p in &r.points {
        let det = p.metrics.failover_detection_us.map(|d| d.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            p.fault_at,
            p.seed,
            p.violations.len(),
            det,
            p.metrics.max_actuator_gap_us,
            p.metrics.missed_control_cycles,
            p.metrics.self_promotions
        );
    }
    out
}

pub fn bench_csv(reports: &[&BenchReport], cmp: Option<&Comparison>) -> String {
    let mut out = String::from("profile,count,p50_ns,p90_ns,p99_ns,max_ns\n");
    for r in reports {
        let p = r.percentiles;
        let name = match r.profile {
            FrameProfile::Compact => "compact",
            FrameProfile::Routed => "routed",
        };
        let _ = writeln!(out, "{name},{},{},{},{},{}", p.count, p.p50, p.p90, p.p99, p.max);
    }
    if let Some(c) = cmp {
        let [a, b, d, e] = c.delta;
        let _ = writeln!(out, "delta,,{a},{b},{d},{e}");
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Written {
    pub report: PathBuf,
    pub trace: PathBuf,
    pub metrics: PathBuf,
    /// Hash of the trace file bytes.
    pub trace_hash: Digest256,
}

pub fn write_run(dir: &Path, run: &ScenarioRun) -> std::io::Result<Written> {
    fs::create_dir_all(dir)?;
    let report = dir.join(REPORT);
    let trace = dir.join(TRACE);
    let metrics = dir.join(METRICS);
    let mut json = serde_json::to_string_pretty(&run.report).expect("reports serialize");
    json.push('\n');
    fs::write(&report, json)?;
    let t = trace_jsonl(&run.trace);
    fs::write(&trace, &t)?;
    fs::write(&metrics, metrics_csv(&run.report.metrics))?;
    Ok(Written { report, trace, metrics, trace_hash: Digest256::of(t.as_bytes()) })
}
