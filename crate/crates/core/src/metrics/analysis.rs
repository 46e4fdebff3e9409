//! Latency distributions computed from the event log: time of flight,
//! issuance-to-motion, command completion, fault lockout and operation runtime.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;
use statrs::statistics::{Data, Max, Min, OrderStatistics};
use thiserror::Error;

use super::{EventRecord, Layer};

pub const COMMAND_BIN_MS: u64 = 100;
pub const RUNTIME_BIN_MS: u64 = 1_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("no samples for {0}")]
    Empty(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub count: usize,
    pub min: f64,
    pub median: f64,
    pub p95: f64,
    pub max: f64,
    pub mean: f64,
    pub bin_ms: u64,
    /// Bin start (ms) → sample count.
    pub histogram: BTreeMap<u64, usize>,
}

impl Summary {
    pub fn from_samples(samples: &[f64], bin_ms: u64) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut histogram = BTreeMap::new();
        for &s in samples {
            *histogram.entry((s.max(0.0) as u64 / bin_ms) * bin_ms).or_insert(0) += 1;
        }
        let mut data = Data::new(samples.to_vec());
        Some(Self {
            count: samples.len(),
            min: data.min(),
            median: data.median(),
            p95: data.percentile(95),
            max: data.max(),
            mean: samples.iter().sum::<f64>() / samples.len() as f64,
            bin_ms,
            histogram,
        })
    }

    /// Fraction of samples in `[lo_ms, hi_ms]`, from the raw samples.
    pub fn fraction_within(samples: &[f64], lo_ms: f64, hi_ms: f64) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        samples.iter().filter(|&&s| s >= lo_ms && s <= hi_ms).count() as f64 / samples.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TofReport {
    pub per_device: BTreeMap<String, Summary>,
    pub overall: Summary,
    /// Raw per-device-per-interval samples (ms).
    #[serde(skip)]
    pub samples: Vec<f64>,
}

/// Time of flight of state messages, averaged to one sample per device per
/// sampling interval (all channels of one device tick share a source
/// timestamp).
pub fn compute_tof<'a>(records: impl IntoIterator<Item = &'a EventRecord>) -> Result<TofReport, AnalysisError> {
    let mut batches: BTreeMap<(String, u64), (f64, usize)> = BTreeMap::new();
    for r in records {
        if r.layer != Layer::Bus || r.kind != "state_rx" {
            continue;
        }
        let Some(src) = r.attr_u64("src_ts") else { continue };
        let tof = r.ts as f64 - src as f64;
        let e = batches.entry((r.subject.clone(), src)).or_insert((0.0, 0));
        e.0 += tof;
        e.1 += 1;
    }
    if batches.is_empty() {
        return Err(AnalysisError::Empty("time of flight"));
    }
    let mut per_device: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for ((dev, _), (sum, n)) in batches {
        per_device.entry(dev).or_default().push(sum / n as f64);
    }
    let samples: Vec<f64> = per_device.values().flatten().copied().collect();
    Ok(TofReport {
        per_device: per_device
            .iter()
            .map(|(d, s)| (d.clone(), Summary::from_samples(s, 1).expect("non-empty")))
            .collect(),
        overall: Summary::from_samples(&samples, 1).expect("non-empty"),
        samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CommandFilter {
    /// Only commands travelling the full span (|target − origin| ≥ 99).
    pub full_sweep_only: bool,
    pub valves_only: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum CommandOutcome {
    Completed,
    Faulted,
    Orphan,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommandReport {
    pub issuance_to_motion: Option<Summary>,
    pub completion: Option<Summary>,
    pub fault_lockout: Option<Summary>,
    pub completed: usize,
    pub faulted: usize,
    /// (system_id, token) of dispatches with neither completion nor fault.
    pub orphans: Vec<(String, String)>,
    #[serde(skip)]
    pub motion_samples: Vec<f64>,
    #[serde(skip)]
    pub completion_samples: Vec<f64>,
    #[serde(skip)]
    pub lockout_samples: Vec<f64>,
}

#[derive(Debug, Default)]
struct CommandTrace {
    issued: u64,
    target: f64,
    origin: f64,
    valve: bool,
    lockout: bool,
    moving: Option<u64>,
    completed: Option<u64>,
    faulted: bool,
}

/// Classifies every actuator dispatch exactly once and builds the three
/// command distributions.
pub fn compute_command_metrics<'a>(
    records: impl IntoIterator<Item = &'a EventRecord>,
    filter: CommandFilter,
) -> Result<CommandReport, AnalysisError> {
    let mut traces: BTreeMap<(String, String), CommandTrace> = BTreeMap::new();
    let mut faults: Vec<(u64, Vec<String>)> = Vec::new();
    let mut group_done: BTreeMap<String, u64> = BTreeMap::new();
    for r in records {
        let key = || (r.subject.clone(), r.token.clone());
        match (r.layer, r.kind.as_str()) {
            (Layer::Actuator, "dispatch") => {
                traces.insert(
                    key(),
                    CommandTrace {
                        issued: r.ts,
                        target: r.attr_f64("target").unwrap_or(0.0),
                        origin: r.attr_f64("origin").unwrap_or(0.0),
                        valve: r.attr_str("kind") == Some("valve"),
                        lockout: r.attr_str("mode") == Some("lockout"),
                        ..Default::default()
                    },
                );
            }
            (Layer::Actuator, "moving") => {
                if let Some(t) = traces.get_mut(&key()) {
                    t.moving.get_or_insert(r.ts);
                }
            }
            (Layer::Actuator, "complete") => {
                if let Some(t) = traces.get_mut(&key()) {
                    t.completed.get_or_insert(r.ts);
                }
            }
            (Layer::Actuator, "escalated" | "superseded") => {
                if let Some(t) = traces.get_mut(&key()) {
                    t.faulted = true;
                }
            }
            (Layer::Interlock, "fault") => {
                let tokens = r
                    .attrs
                    .get("lockout_tokens")
                    .and_then(|v| v.as_array())
                    .map(|a| a.iter().filter_map(|t| t.as_str().map(str::to_string)).collect())
                    .unwrap_or_default();
                faults.push((r.ts, tokens));
            }
            (Layer::Group, "complete") => {
                group_done.insert(r.token.clone(), r.ts);
            }
            _ => {}
        }
    }

    let mut report = CommandReport {
        issuance_to_motion: None,
        completion: None,
        fault_lockout: None,
        completed: 0,
        faulted: 0,
        orphans: Vec::new(),
        motion_samples: Vec::new(),
        completion_samples: Vec::new(),
        lockout_samples: Vec::new(),
    };
    for ((id, token), t) in &traces {
        match (t.completed, t.faulted) {
            (Some(_), _) => report.completed += 1,
            (None, true) => report.faulted += 1,
            (None, false) => report.orphans.push((id.clone(), token.clone())),
        }
        if t.lockout || (filter.valves_only && !t.valve) || (filter.full_sweep_only && (t.target - t.origin).abs() < 99.0) {
            continue;
        }
        if let Some(m) = t.moving {
            report.motion_samples.push((m - t.issued) as f64);
        }
        if let Some(c) = t.completed {
            report.completion_samples.push((c - t.issued) as f64);
        }
    }
    for (ts, tokens) in faults {
        if tokens.is_empty() {
            continue;
        }
        let done: Option<Vec<u64>> = tokens.iter().map(|t| group_done.get(t).copied()).collect();
        if let Some(done) = done {
            let last = done.into_iter().max().unwrap_or(ts);
            report.lockout_samples.push(last.saturating_sub(ts) as f64);
        }
    }
    if traces.is_empty() {
        return Err(AnalysisError::Empty("command metrics"));
    }
    report.issuance_to_motion = Summary::from_samples(&report.motion_samples, COMMAND_BIN_MS);
    report.completion = Summary::from_samples(&report.completion_samples, COMMAND_BIN_MS);
    report.fault_lockout = Summary::from_samples(&report.lockout_samples, COMMAND_BIN_MS);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RuntimeReport {
    pub per_op: BTreeMap<String, Summary>,
    #[serde(skip)]
    pub samples: BTreeMap<String, Vec<f64>>,
    /// (op_id, run token) of runs that faulted instead of releasing.
    pub faulted: Vec<(String, String)>,
    /// Granted runs with neither release nor fault in the window.
    pub unfinished: Vec<(String, String)>,
}

/// Operation runtime from interlock grant to release; queue time excluded.
pub fn compute_op_runtime<'a>(records: impl IntoIterator<Item = &'a EventRecord>) -> Result<RuntimeReport, AnalysisError> {
    let mut granted: BTreeMap<String, (String, u64)> = BTreeMap::new();
    let mut samples: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut faulted = Vec::new();
    for r in records {
        if r.layer != Layer::Interlock {
            continue;
        }
        match r.kind.as_str() {
            "grant" => {
                granted.insert(r.token.clone(), (r.subject.clone(), r.ts));
            }
            "release" => {
                if let Some((op, t0)) = granted.remove(&r.token) {
                    samples.entry(op).or_default().push((r.ts - t0) as f64);
                }
            }
            "fault" if granted.remove(&r.token).is_some() => {
                faulted.push((r.subject.clone(), r.token.clone()));
            }
            _ => {}
        }
    }
    if samples.is_empty() && faulted.is_empty() {
        return Err(AnalysisError::Empty("operation runtime"));
    }
    let unfinished = granted.into_iter().map(|(tok, (op, _))| (op, tok)).collect();
    Ok(RuntimeReport {
        per_op: samples
            .iter()
            .map(|(op, s)| (op.clone(), Summary::from_samples(s, RUNTIME_BIN_MS).expect("non-empty")))
            .collect(),
        samples,
        faulted,
        unfinished,
    })
}

fn row(out: &mut String, name: &str, s: &Summary, scale: f64, unit: &str) {
    let _ = writeln!(
        out,
        "{:<16} {:>7} {:>10.3} {:>10.3} {:>10.3} {:>10.3}  {unit}",
        name,
        s.count,
        s.min / scale,
        s.median / scale,
        s.p95 / scale,
        s.max / scale
    );
}

fn header(out: &mut String, title: &str, first: &str) {
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, "{:<16} {:>7} {:>10} {:>10} {:>10} {:>10}", first, "n", "min", "median", "p95", "max");
}

pub fn format_tof(r: &TofReport) -> String {
    let mut out = String::new();
    header(&mut out, "time of flight (ms)", "device");
    for (dev, s) in &r.per_device {
        row(&mut out, dev, s, 1.0, "ms");
    }
    row(&mut out, "all", &r.overall, 1.0, "ms");
    out
}

pub fn format_commands(r: &CommandReport, which: &[&str]) -> String {
    let mut out = String::new();
    header(&mut out, "command metrics (s)", "metric");
    for (name, s) in [
        ("motion", &r.issuance_to_motion),
        ("completion", &r.completion),
        ("fault-lockout", &r.fault_lockout),
    ] {
        if !which.contains(&name) {
            continue;
        }
        match s {
            Some(s) => row(&mut out, name, s, 1000.0, "s"),
            None => {
                let _ = writeln!(out, "{name:<16} {:>7}", 0);
            }
        }
    }
    let _ = writeln!(out, "completed={} faulted={} orphans={}", r.completed, r.faulted, r.orphans.len());
    out
}

pub fn format_runtime(r: &RuntimeReport) -> String {
    let mut out = String::new();
    header(&mut out, "operation runtime (s)", "op");
    for (op, s) in &r.per_op {
        row(&mut out, op, s, 1000.0, "s");
    }
    let faulted: BTreeSet<&str> = r.faulted.iter().map(|(op, _)| op.as_str()).collect();
    let _ = writeln!(out, "faulted runs={} ({})", r.faulted.len(), faulted.into_iter().collect::<Vec<_>>().join(", "));
    out
}

pub fn summary_csv(rows: &[(&str, &Summary)]) -> String {
    let mut out = String::from("metric,count,min_ms,median_ms,p95_ms,max_ms,mean_ms\n");
    for (name, s) in rows {
        let _ = writeln!(out, "{name},{},{},{},{},{},{}", s.count, s.min, s.median, s.p95, s.max, s.mean);
    }
    out
}
