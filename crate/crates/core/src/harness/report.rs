use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use super::simulate::RunReport;

pub const REPORT_FORMAT: &str = "agentspawn-report/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Human,
    /// One `key=value` per line in a fixed order; floats use six decimals.
    Machine,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "human" => Ok(ReportFormat::Human),
            "machine" => Ok(ReportFormat::Machine),
            other => Err(format!("unknown report format `{other}`")),
        }
    }
}

fn f6(v: f64) -> String {
    format!("{v:.6}")
}

fn opt6(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), f6)
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Ordered key/value pairs shared by both formats.
fn entries(r: &RunReport) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = Vec::new();
    let mut put = |k: &str, v: String| out.push((k.to_string(), v));
    put("report", REPORT_FORMAT.into());
    put("workload", r.workload.clone());
    put("seed", r.seed.to_string());
    put("completed", r.completed.to_string());
    put("root_steps", r.root_steps.to_string());
    put("end_time", f6(r.end_time));

    put("spawns.requested", r.spawns_requested.to_string());
    put("spawns.started", r.spawns_started.to_string());
    put("spawns.queued", r.spawns_queued.to_string());
    put("spawns.rejected", r.spawns_rejected.to_string());
    put("spawns.timed_out", r.spawns_timed_out.to_string());
    put("spawns.failed", r.spawns_failed.to_string());
    put("spawns.succeeded", r.successes.to_string());
    for gate in ["depth_limit", "concurrency_limit", "cooldown"] {
        put(&format!("blocked.{gate}"), r.blocked.get(gate).copied().unwrap_or(0).to_string());
    }

    put("tree.nodes", r.tree_nodes.to_string());
    put("tree.depth", r.tree_depth.to_string());
    put(
        "tree.shape",
        r.tree_shape.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(","),
    );
    put("invariant_violations", r.violations.to_string());

    put("memory.avg_memory", opt6(r.avg_memory));
    put("memory.sliced_memory", opt6(r.avg_sliced));
    put("memory.reduction", opt6(r.reduction));
    put("memory.episodic_items", r.episodic_items.to_string());

    let m = r.merge_totals();
    let rates = m.rates();
    put("merge.conflicts", m.total().to_string());
    put("merge.auto", m.auto.to_string());
    put("merge.semantic", m.semantic.to_string());
    put("merge.escalated", m.escalated.to_string());
    put("merge.auto_rate", opt6(rates.map(|t| t.0)));
    put("merge.semantic_rate", opt6(rates.map(|t| t.1)));
    put("merge.escalated_rate", opt6(rates.map(|t| t.2)));
    put("merge.semantic_attempts", m.semantic_attempts.to_string());
    put("merge.semantic_success_rate", opt6(ratio(m.semantic, m.semantic_attempts)));
    put("merge.runtime_conflicts", r.runtime_merge.total().to_string());
    put("merge.escalations", r.escalations.to_string());
    put("merge.followups_resolved", r.followups_resolved.to_string());
    put("merge.dropped_hunks", r.dropped_hunks.to_string());
    if let Some(b) = &r.batch {
        put("batch.conflicts", b.stats.total().to_string());
        put("batch.disjoint", b.disjoint_scenarios.to_string());
        put("batch.disjoint_failures", b.disjoint_failures.to_string());
        put("batch.silent_merges", b.silent_merges.to_string());
    }

    put("cost.total_tokens", r.total_tokens.to_string());
    put("cost.api_calls", r.total_calls.to_string());
    put("cost.total", f6(r.total_cost));
    put("cost.cost_per_success", opt6(r.cost_per_success));

    put("events.count", r.event_count.to_string());
    put("events.digest", format!("{:016x}", r.event_digest));

    for s in &r.spawns {
        put(
            &format!("spawn.{}", s.spawn_id),
            format!(
                "parent={} depth={} specialization={} score={} outcome={} started={} ended={} parent_tokens={} slice_tokens={} tokens={} calls={}",
                s.parent_id,
                s.depth,
                s.specialization,
                f6(s.score),
                s.outcome,
                opt6(s.started_at),
                opt6(s.ended_at),
                s.parent_tokens,
                s.slice_tokens,
                s.tokens_used,
                s.api_calls,
            ),
        );
    }
    out
}

pub fn emit_report(r: &RunReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Machine => entries(r).into_iter().map(|(k, v)| format!("{k}={v}\n")).collect(),
        ReportFormat::Human => human(r),
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{:.1}%", v * 100.0))
}

fn human(r: &RunReport) -> String {
    let mut s = String::new();
    let status = if r.completed { "completed" } else { "incomplete" };
    let _ = writeln!(s, "workload {} (seed {}): {status}", r.workload, r.seed);
    let _ = writeln!(s, "root steps {}, virtual time {:.1}s, {} events", r.root_steps, r.end_time, r.event_count);
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "spawns: {} requested, {} started, {} queued, {} rejected, {} timed out, {} failed, {} succeeded",
        r.spawns_requested, r.spawns_started, r.spawns_queued, r.spawns_rejected, r.spawns_timed_out, r.spawns_failed, r.successes
    );
    let blocked: Vec<String> = r.blocked.iter().map(|(k, v)| format!("{k} {v}")).collect();
    if !blocked.is_empty() {
        let _ = writeln!(s, "blocked: {}", blocked.join(", "));
    }
    let shape: Vec<String> = r.tree_shape.iter().map(|n| n.to_string()).collect();
    let _ = writeln!(
        s,
        "tree: {} nodes, depth {}, per level [{}], {} invariant violations",
        r.tree_nodes,
        r.tree_depth,
        shape.join(", "),
        r.violations
    );
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<10} | {:>13} | {:>9}", "Avg Memory", "Sliced Memory", "Reduction");
    let _ = writeln!(s, "{:-<10}-+-{:->13}-+-{:->9}", "", "", "");
    let tok = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.0} tok"));
    let _ = writeln!(s, "{:<10} | {:>13} | {:>9}", tok(r.avg_memory), tok(r.avg_sliced), pct(r.reduction));
    let _ = writeln!(s);

    let m = r.merge_totals();
    let rates = m.rates();
    let _ = writeln!(s, "{:<10} | {:>7} | {:>7}", "Tier", "Count", "Share");
    let _ = writeln!(s, "{:-<10}-+-{:->7}-+-{:->7}", "", "", "");
    for (name, n, rate) in [
        ("auto", m.auto, rates.map(|t| t.0)),
        ("semantic", m.semantic, rates.map(|t| t.1)),
        ("escalated", m.escalated, rates.map(|t| t.2)),
    ] {
        let _ = writeln!(s, "{name:<10} | {n:>7} | {:>7}", pct(rate));
    }
    let _ = writeln!(
        s,
        "semantic success {} of {} attempts",
        pct(ratio(m.semantic, m.semantic_attempts)),
        m.semantic_attempts
    );
    if let Some(b) = &r.batch {
        let _ = writeln!(
            s,
            "conflict batch: {} disjoint ({} failed), {} silent merges",
            b.disjoint_scenarios, b.disjoint_failures, b.silent_merges
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "cost: {} tokens, {} calls, {:.4} total, {} per success",
        r.total_tokens,
        r.total_calls,
        r.total_cost,
        r.cost_per_success.map_or_else(|| "n/a".into(), |c| format!("{c:.4}"))
    );
    if !r.spawns.is_empty() {
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<11} {:<11} {:>5} {:<22} {:>6} {:<14} {:>9} {:>9}",
            "spawn", "parent", "depth", "specialization", "score", "outcome", "start", "end"
        );
        for x in &r.spawns {
            let t = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.1}"));
            let _ = writeln!(
                s,
                "{:<11} {:<11} {:>5} {:<22} {:>6.3} {:<14} {:>9} {:>9}",
                x.spawn_id,
                x.parent_id,
                x.depth,
                x.specialization,
                x.score,
                x.outcome,
                t(x.started_at),
                t(x.ended_at)
            );
        }
    }
    s
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReportParseError {
    #[error("line {0} is not key=value")]
    Malformed(usize),
    #[error("duplicate key `{0}`")]
    Duplicate(String),
    #[error("missing key `{0}`")]
    Missing(String),
    #[error("key `{key}` has unparsable value `{value}`")]
    Value { key: String, value: String },
}

/// A machine report read back into its key/value pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MachineReport {
    pub entries: BTreeMap<String, String>,
}

impl MachineReport {
    pub fn parse(text: &str) -> Result<Self, ReportParseError> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ReportParseError::Malformed(i + 1))?;
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(ReportParseError::Duplicate(k.to_string()));
            }
        }
        let out = Self { entries };
        if out.get("report")? != REPORT_FORMAT {
            return Err(ReportParseError::Value {
                key: "report".into(),
                value: out.entries["report"].clone(),
            });
        }
        Ok(out)
    }

    pub fn get(&self, key: &str) -> Result<&str, ReportParseError> {
        self.entries
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| ReportParseError::Missing(key.to_string()))
    }

    /// `None` for `n/a`.
    pub fn number(&self, key: &str) -> Result<Option<f64>, ReportParseError> {
        let v = self.get(key)?;
        if v == "n/a" {
            return Ok(None);
        }
        v.parse().map(Some).map_err(|_| ReportParseError::Value {
            key: key.to_string(),
            value: v.to_string(),
        })
    }
}
