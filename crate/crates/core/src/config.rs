//! Plant configuration document (TOML) and its static validation.
//!
//! [`PlantConfig::validate`] never stops at the first problem; it returns
//! every violation it can find. [`PlantConfig::resolve`] turns a valid
//! document into the objects the engines run on.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuator::{ActuatorBinding, ActuatorKind, ActuatorLayer, KindPolicy};
use crate::bus::{DelayModel, LoopbackConfig};
use crate::condition::{Expr, Term};
use crate::group::GroupMember;
use crate::interlock::{Interlock, WatchdogThresholds};
use crate::operation::{OperationDef, Step, DEFAULT_GROUP_TIMEOUT_MS, DEFAULT_POLL_MS};
use crate::routine::{FaultPolicy, RoutineDef, Transition, DEFAULT_EVAL_PERIOD_MS};
use crate::sim::{ChannelSpec, DeviceSpec, SimParams};

pub const LOOPBACK_URL: &str = "loopback:";
pub const DEFAULT_EPOCH_MS: u64 = 1_700_000_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct BrokerConfig {
    /// `loopback:` for the in-process bus, `mqtt://host:port` for an external broker.
    #[serde(default = "default_url")]
    pub url: String,
    #[serde(default)]
    pub default_delay: DelayModel,
    /// Per-device link delay overrides.
    #[serde(default)]
    pub link_delays: BTreeMap<String, DelayModel>,
    #[serde(default)]
    pub qos0_loss: f64,
    #[serde(default)]
    pub qos1_duplicate: f64,
}

fn default_url() -> String {
    LOOPBACK_URL.to_string()
}

impl Default for BrokerConfig {
    fn default() -> Self {
        Self {
            url: default_url(),
            default_delay: DelayModel::default(),
            link_delays: BTreeMap::new(),
            qos0_loss: 0.0,
            qos1_duplicate: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct LogConfig {
    /// Event log file. Relative paths resolve against the config file's directory.
    #[serde(default)]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct TimingConfig {
    #[serde(default = "default_fault_scan")]
    pub fault_scan_ms: u64,
    #[serde(default = "default_watchdog")]
    pub watchdog_ms: u64,
    #[serde(default = "default_queue_warn")]
    pub queue_warn_ms: u64,
    #[serde(default = "default_hold_warn")]
    pub hold_warn_ms: u64,
    #[serde(default)]
    pub valve: KindPolicy,
    #[serde(default)]
    pub pump: KindPolicy,
}

fn default_fault_scan() -> u64 {
    1_000
}

fn default_watchdog() -> u64 {
    10_000
}

fn default_queue_warn() -> u64 {
    WatchdogThresholds::default().queue_warn_ms
}

fn default_hold_warn() -> u64 {
    WatchdogThresholds::default().hold_warn_ms
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            fault_scan_ms: default_fault_scan(),
            watchdog_ms: default_watchdog(),
            queue_warn_ms: default_queue_warn(),
            hold_warn_ms: default_hold_warn(),
            valve: KindPolicy::default(),
            pump: KindPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    /// Simulated clock origin.
    #[serde(default = "default_epoch")]
    pub epoch_ms: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_sweep")]
    pub sweep_time_s: f64,
    /// Delay between a device receiving a command and acting on it.
    #[serde(default = "default_latency")]
    pub command_latency: DelayModel,
    #[serde(default = "default_replay_window")]
    pub replay_window_ms: u64,
}

fn default_sweep() -> f64 {
    SimParams::default().sweep_time_s
}

fn default_latency() -> DelayModel {
    SimParams::default().command_latency
}

fn default_replay_window() -> u64 {
    SimParams::default().replay_window_ms
}

impl SimConfig {
    pub fn params(&self) -> SimParams {
        SimParams {
            sweep_time_s: self.sweep_time_s,
            command_latency: self.command_latency,
            replay_window_ms: self.replay_window_ms,
            seed: self.seed,
        }
    }
}

fn yes() -> bool {
    true
}

fn default_epoch() -> u64 {
    DEFAULT_EPOCH_MS
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            epoch_ms: DEFAULT_EPOCH_MS,
            seed: 0,
            sweep_time_s: default_sweep(),
            command_latency: default_latency(),
            replay_window_ms: default_replay_window(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ActuatorSpec {
    pub system_id: String,
    pub kind: ActuatorKind,
    pub device: String,
    pub io: u32,
    /// Defaults to 2.0 for valves and 0.5 for pumps.
    #[serde(default)]
    pub tolerance: Option<f64>,
    #[serde(default)]
    pub idle_value: f64,
}

impl ActuatorSpec {
    pub fn binding(&self) -> ActuatorBinding {
        ActuatorBinding {
            system_id: self.system_id.clone(),
            kind: self.kind,
            device: self.device.clone(),
            io: self.io,
            tolerance: self.tolerance.unwrap_or(match self.kind {
                ActuatorKind::Valve => 2.0,
                ActuatorKind::Pump => 0.5,
            }),
            idle_value: self.idle_value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    pub system_id: String,
    pub device: String,
    pub io: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ResourceSpec {
    pub id: String,
    pub actuators: Vec<String>,
    /// Safe-state commands dispatched when the resource faults.
    pub lockout: Vec<GroupMember>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepSpec {
    Group {
        members: Vec<GroupMember>,
        #[serde(default = "default_group_timeout")]
        timeout_ms: u64,
    },
    Condition {
        until: String,
        #[serde(default)]
        fail_if: Option<String>,
        #[serde(default = "default_poll")]
        poll_ms: u64,
        timeout_ms: u64,
    },
    Delay {
        duration_ms: u64,
    },
}

fn default_group_timeout() -> u64 {
    DEFAULT_GROUP_TIMEOUT_MS
}

fn default_poll() -> u64 {
    DEFAULT_POLL_MS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct OperationSpec {
    pub op_id: String,
    pub resources: Vec<String>,
    /// Unique plant-wide; higher wins.
    pub priority: i64,
    pub steps: Vec<StepSpec>,
    /// Defaults to every actuator the steps touch, commanded to its idle value.
    #[serde(default)]
    pub idle_restore: Option<Vec<GroupMember>>,
    #[serde(default = "default_group_timeout")]
    pub restore_timeout_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct TransitionSpec {
    pub from: String,
    /// Condition DSL; may also use `@elapsed` and `external(name)` terms.
    pub trigger: String,
    pub op: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RoutineSpec {
    pub routine_id: String,
    pub states: Vec<String>,
    pub initial: String,
    pub owned_ops: Vec<String>,
    pub transitions: Vec<TransitionSpec>,
    #[serde(default = "default_eval_period")]
    pub eval_period_ms: u64,
    #[serde(default)]
    pub fault_policy: FaultPolicy,
    #[serde(default = "yes")]
    pub active: bool,
}

fn default_eval_period() -> u64 {
    DEFAULT_EVAL_PERIOD_MS
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct PlantConfig {
    #[serde(default)]
    pub broker: BrokerConfig,
    #[serde(default)]
    pub log: LogConfig,
    #[serde(default)]
    pub timing: TimingConfig,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub devices: Vec<DeviceSpec>,
    #[serde(default)]
    pub actuators: Vec<ActuatorSpec>,
    #[serde(default)]
    pub sensors: Vec<SensorSpec>,
    #[serde(default)]
    pub resources: Vec<ResourceSpec>,
    #[serde(default)]
    pub operations: Vec<OperationSpec>,
    #[serde(default)]
    pub routines: Vec<RoutineSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub code: &'static str,
    /// Where in the document, e.g. `operations[fill].steps[0]`.
    pub at: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} ({})", self.code, self.message, self.at)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parse error at line {line}, column {col}: {message}")]
    Parse { line: usize, col: usize, message: String },
    #[error("{} violation(s):\n{}", .0.len(), .0.iter().map(|v| format!("  {v}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Violation>),
}

/// Everything the engines need, built from a valid document.
pub struct Resolved {
    pub actuators: ActuatorLayer,
    pub interlock: Interlock,
    pub resource_actuators: BTreeMap<String, BTreeSet<String>>,
    pub sensor_channels: BTreeMap<(String, u32), String>,
    pub operations: Vec<OperationDef>,
    pub routines: Vec<RoutineDef>,
    pub loopback: LoopbackConfig,
}

pub(crate) fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map(|i| before.len() - i).unwrap_or(before.len() + 1);
    (line, col)
}

pub(crate) fn parse_toml<T: serde::de::DeserializeOwned>(src: &str) -> Result<T, ConfigError> {
    toml::from_str(src).map_err(|e| {
        let (line, col) = e.span().map(|s| line_col(src, s.start)).unwrap_or((0, 0));
        ConfigError::Parse {
            line,
            col,
            message: e.message().to_string(),
        }
    })
}

impl PlantConfig {
    pub fn parse(src: &str) -> Result<Self, ConfigError> {
        parse_toml(src)
    }

    /// Reads and parses a document; relative log paths are anchored at its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let src = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::parse(&src)?;
        if let (Some(p), Some(dir)) = (&cfg.log.path, path.parent()) {
            if p.is_relative() {
                cfg.log.path = Some(dir.join(p));
            }
        }
        Ok(cfg)
    }

    /// Parse, validate and resolve in one go.
    pub fn load_valid(path: &Path) -> Result<(Self, Resolved), ConfigError> {
        let cfg = Self::load(path)?;
        let resolved = cfg.resolve()?;
        Ok((cfg, resolved))
    }

    pub fn is_loopback(&self) -> bool {
        self.broker.url == LOOPBACK_URL
    }

    /// Returns every violation found; empty means valid.
    pub fn validate(&self) -> Vec<Violation> {
        Validator::new(self).run()
    }

    pub fn resolve(&self) -> Result<Resolved, ConfigError> {
        let violations = self.validate();
        if !violations.is_empty() {
            return Err(ConfigError::Invalid(violations));
        }
        let mut actuators = ActuatorLayer::new(self.actuators.iter().map(ActuatorSpec::binding))
            .map_err(|e| ConfigError::Invalid(vec![violation("duplicate-id", "actuators", e.to_string())]))?;
        actuators.set_policy(ActuatorKind::Valve, self.timing.valve);
        actuators.set_policy(ActuatorKind::Pump, self.timing.pump);

        let mut interlock = Interlock::new(self.resources.iter().map(|r| r.id.clone()));
        interlock.set_thresholds(WatchdogThresholds {
            queue_warn_ms: self.timing.queue_warn_ms,
            hold_warn_ms: self.timing.hold_warn_ms,
        });
        let invalid = |e: crate::interlock::InterlockError| ConfigError::Invalid(vec![violation("interlock", "resources", e.to_string())]);
        for r in &self.resources {
            interlock.set_lockout(&r.id, r.lockout.clone()).map_err(invalid)?;
        }
        for op in &self.operations {
            interlock.register(&op.op_id, op.priority).map_err(invalid)?;
        }
        let resource_actuators = self
            .resources
            .iter()
            .map(|r| (r.id.clone(), r.actuators.iter().cloned().collect()))
            .collect();
        let sensor_channels = self
            .sensors
            .iter()
            .map(|s| ((s.device.clone(), s.io), s.system_id.clone()))
            .collect();
        let operations = operations_with_restore(self);
        let routines = self.routines.iter().map(resolve_routine).collect();
        let loopback = LoopbackConfig {
            default_delay: self.broker.default_delay,
            link_delays: self.broker.link_delays.clone(),
            qos0_loss: self.broker.qos0_loss,
            qos1_duplicate: self.broker.qos1_duplicate,
            seed: self.sim.seed ^ 0x5eed,
        };
        Ok(Resolved {
            actuators,
            interlock,
            resource_actuators,
            sensor_channels,
            operations,
            routines,
            loopback,
        })
    }
}

fn violation(code: &'static str, at: impl Into<String>, message: impl Into<String>) -> Violation {
    Violation {
        code,
        at: at.into(),
        message: message.into(),
    }
}

fn expr(src: &str) -> Expr {
    Expr::parse(src).expect("validated")
}

/// The restore group an operation ends with.
pub fn effective_restore(op: &OperationSpec, idle: impl Fn(&str) -> f64) -> Vec<GroupMember> {
    if let Some(explicit) = &op.idle_restore {
        return explicit.clone();
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for step in &op.steps {
        if let StepSpec::Group { members, .. } = step {
            for m in members {
                if seen.insert(m.system_id.clone()) {
                    out.push(GroupMember::new(m.system_id.clone(), idle(&m.system_id)));
                }
            }
        }
    }
    out
}

fn resolve_operation(op: &OperationSpec) -> OperationDef {
    OperationDef {
        op_id: op.op_id.clone(),
        resources: op.resources.iter().cloned().collect(),
        priority: op.priority,
        steps: op
            .steps
            .iter()
            .map(|s| match s {
                StepSpec::Group { members, timeout_ms } => Step::Group {
                    members: members.clone(),
                    timeout_ms: *timeout_ms,
                },
                StepSpec::Condition {
                    until,
                    fail_if,
                    poll_ms,
                    timeout_ms,
                } => Step::Condition {
                    until: expr(until),
                    fail_if: fail_if.as_deref().map(expr),
                    poll_ms: *poll_ms,
                    timeout_ms: Some(*timeout_ms),
                    min_elapsed_ms: 0,
                },
                StepSpec::Delay { duration_ms } => Step::delay(*duration_ms),
            })
            .collect(),
        idle_restore: Vec::new(),
        restore_timeout_ms: op.restore_timeout_ms,
    }
}

fn resolve_routine(r: &RoutineSpec) -> RoutineDef {
    RoutineDef {
        routine_id: r.routine_id.clone(),
        states: r.states.iter().cloned().collect(),
        initial: r.initial.clone(),
        owned_ops: r.owned_ops.iter().cloned().collect(),
        transitions: r
            .transitions
            .iter()
            .map(|t| Transition {
                from: t.from.clone(),
                trigger: expr(&t.trigger),
                op: t.op.clone(),
                to: t.to.clone(),
            })
            .collect(),
        eval_period_ms: r.eval_period_ms,
        fault_policy: r.fault_policy,
        active: r.active,
    }
}

struct Validator<'a> {
    cfg: &'a PlantConfig,
    out: Vec<Violation>,
    actuators: BTreeMap<&'a str, &'a ActuatorSpec>,
    sensors: BTreeSet<&'a str>,
    resources: BTreeMap<&'a str, BTreeSet<&'a str>>,
    ops: BTreeMap<&'a str, &'a OperationSpec>,
}

impl<'a> Validator<'a> {
    fn new(cfg: &'a PlantConfig) -> Self {
        Self {
            cfg,
            out: Vec::new(),
            actuators: BTreeMap::new(),
            sensors: BTreeSet::new(),
            resources: BTreeMap::new(),
            ops: BTreeMap::new(),
        }
    }

    fn push(&mut self, code: &'static str, at: impl Into<String>, message: impl Into<String>) {
        self.out.push(violation(code, at, message));
    }

    fn run(mut self) -> Vec<Violation> {
        self.broker();
        self.topology();
        self.bindings();
        self.resources();
        self.operations();
        self.routines();
        self.out
    }

    fn broker(&mut self) {
        let b = &self.cfg.broker;
        if b.url != LOOPBACK_URL && !(b.url.starts_with("mqtt://") || b.url.starts_with("tcp://")) {
            self.push("broker", "broker.url", format!("unsupported broker url {:?}", b.url));
        }
        let delays = std::iter::once(("default_delay".to_string(), b.default_delay))
            .chain(b.link_delays.iter().map(|(d, m)| (format!("link_delays.{d}"), *m)));
        let bad: Vec<String> = delays.filter(|(_, m)| !m.is_valid()).map(|(at, _)| at).collect();
        for at in bad {
            self.push("delay-model", format!("broker.{at}"), "delay parameters must be finite and non-negative");
        }
        for (name, p) in [("qos0_loss", b.qos0_loss), ("qos1_duplicate", b.qos1_duplicate)] {
            if !(0.0..=1.0).contains(&p) {
                self.push("probability", format!("broker.{name}"), "must lie in [0, 1]");
            }
        }
        if !self.cfg.sim.command_latency.is_valid() {
            self.push("delay-model", "sim.command_latency", "delay parameters must be finite and non-negative");
        }
        if self.cfg.sim.sweep_time_s.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            self.push("sim", "sim.sweep_time_s", "sweep time must be positive");
        }
        let t = &self.cfg.timing;
        for (name, v) in [("fault_scan_ms", t.fault_scan_ms), ("watchdog_ms", t.watchdog_ms)] {
            if v == 0 {
                self.push("timing", format!("timing.{name}"), "period must be positive");
            }
        }
    }

    fn topology(&mut self) {
        let mut ids = BTreeSet::new();
        for d in &self.cfg.devices {
            if !ids.insert(d.id.as_str()) {
                self.push("duplicate-id", format!("devices[{}]", d.id), "device id declared twice");
            }
            if d.id.is_empty() || d.id.contains(['/', '+', '#']) {
                self.push("topic", format!("devices[{}]", d.id), "device id must be a single topic level");
            }
            let mut ios = BTreeSet::new();
            for ch in &d.channels {
                if let ChannelSpec::Sensor { io, signal } = ch {
                    if let Err(msg) = signal.check() {
                        self.push("signal", format!("devices[{}].io[{io}]", d.id), msg);
                    }
                }
                for io in ch.ios() {
                    if !ios.insert(io) {
                        self.push("duplicate-id", format!("devices[{}]", d.id), format!("channel {io} declared twice"));
                    }
                }
            }
        }
    }

    fn channel_kind(&self, device: &str, io: u32) -> Option<Option<ActuatorKind>> {
        let dev = self.cfg.devices.iter().find(|d| d.id == device)?;
        dev.channels.iter().find_map(|ch| match ch {
            ChannelSpec::Valve { io: i, .. } if *i == io => Some(Some(ActuatorKind::Valve)),
            ChannelSpec::Pump { io: i, .. } if *i == io => Some(Some(ActuatorKind::Pump)),
            other if other.ios().contains(&io) => Some(None),
            _ => None,
        })
    }

    fn bindings(&mut self) {
        let check_devices = !self.cfg.devices.is_empty();
        let mut channels: BTreeMap<(String, u32), String> = BTreeMap::new();
        for a in &self.cfg.actuators {
            let at = format!("actuators[{}]", a.system_id);
            if self.actuators.insert(&a.system_id, a).is_some() {
                self.push("duplicate-id", &at, "actuator system_id declared twice");
            }
            if let Some(other) = channels.insert((a.device.clone(), a.io), a.system_id.clone()) {
                self.push("duplicate-id", &at, format!("channel {}/{} already bound to {other}", a.device, a.io));
            }
            if a.tolerance.is_some_and(|t| t.is_nan() || t < 0.0) {
                self.push("tolerance", &at, "tolerance must be non-negative");
            }
            if check_devices {
                match self.channel_kind(&a.device, a.io) {
                    None => self.push("unknown-ref", &at, format!("no channel {}/{} in the device topology", a.device, a.io)),
                    Some(k) if k != Some(a.kind) => self.push("channel-kind", &at, format!("channel {}/{} is not a {:?}", a.device, a.io, a.kind)),
                    _ => {}
                }
            }
        }
        for s in &self.cfg.sensors {
            let at = format!("sensors[{}]", s.system_id);
            if self.actuators.contains_key(s.system_id.as_str()) || !self.sensors.insert(&s.system_id) {
                self.push("duplicate-id", &at, "sensor system_id declared twice");
            }
            if let Some(other) = channels.insert((s.device.clone(), s.io), s.system_id.clone()) {
                self.push("duplicate-id", &at, format!("channel {}/{} already bound to {other}", s.device, s.io));
            }
            if check_devices && self.channel_kind(&s.device, s.io).is_none() {
                self.push("unknown-ref", &at, format!("no channel {}/{} in the device topology", s.device, s.io));
            }
        }
    }

    fn resources(&mut self) {
        let mut assigned: BTreeMap<&str, &str> = BTreeMap::new();
        for r in &self.cfg.resources {
            let at = format!("resources[{}]", r.id);
            let set: BTreeSet<&str> = r.actuators.iter().map(String::as_str).collect();
            if self.resources.insert(&r.id, set.clone()).is_some() {
                self.push("duplicate-id", &at, "resource declared twice");
            }
            for a in &r.actuators {
                if !self.actuators.contains_key(a.as_str()) {
                    self.push("unknown-ref", &at, format!("unknown actuator {a}"));
                }
                if let Some(other) = assigned.insert(a, &r.id) {
                    if other != r.id {
                        self.push("resource-overlap", &at, format!("actuator {a} already belongs to {other}"));
                    }
                }
            }
            if r.lockout.is_empty() && !r.actuators.is_empty() {
                self.push("lockout", &at, "resource has no lockout plan");
            }
            let mut seen = BTreeSet::new();
            for m in &r.lockout {
                if !set.contains(m.system_id.as_str()) {
                    self.push("lockout", &at, format!("lockout commands {} outside the resource", m.system_id));
                }
                if !seen.insert(&m.system_id) {
                    self.push("duplicate-id", &at, format!("lockout lists {} twice", m.system_id));
                }
            }
        }
    }

    fn members(&mut self, at: &str, members: &[GroupMember], allowed: &BTreeSet<&str>) {
        if members.is_empty() {
            self.push("group", at, "group has no members");
        }
        let mut seen = BTreeSet::new();
        for m in members {
            if !self.actuators.contains_key(m.system_id.as_str()) {
                self.push("unknown-ref", at, format!("unknown actuator {}", m.system_id));
            } else if !allowed.contains(m.system_id.as_str()) {
                self.push("C2", at, format!("{} is outside the operation's resources", m.system_id));
            }
            if !seen.insert(&m.system_id) {
                self.push("group", at, format!("{} listed twice", m.system_id));
            }
        }
    }

    fn expression(&mut self, at: &str, src: &str, routine: bool) -> Option<Expr> {
        match Expr::parse(src) {
            Err(e) => {
                self.push("expression", at, format!("{src:?}: {e}"));
                None
            }
            Ok(expr) => {
                for s in expr.sensors() {
                    if !self.sensors.contains(s) && !self.actuators.contains_key(s) {
                        self.push("unknown-ref", at, format!("unknown sensor {s}"));
                    }
                }
                if !routine && expr.terms().iter().any(|t| matches!(t, Term::External(_))) {
                    self.push("expression", at, "external() is only available in routine triggers");
                }
                Some(expr)
            }
        }
    }

    fn operations(&mut self) {
        let mut priorities: BTreeMap<i64, &str> = BTreeMap::new();
        for op in &self.cfg.operations {
            let at = format!("operations[{}]", op.op_id);
            if self.ops.insert(&op.op_id, op).is_some() {
                self.push("duplicate-id", &at, "operation declared twice");
            }
            if let Some(other) = priorities.insert(op.priority, &op.op_id) {
                self.push("P not unique", &at, format!("priority {} already used by {other}", op.priority));
            }
            if op.resources.is_empty() {
                self.push("resources", &at, "operation declares no resources");
            }
            let mut allowed = BTreeSet::new();
            for r in &op.resources {
                match self.resources.get(r.as_str()) {
                    Some(set) => allowed.extend(set.iter().copied()),
                    None => self.push("unknown-ref", &at, format!("unknown resource {r}")),
                }
            }
            // last commanded value per actuator, for the static C3 check
            let mut last: BTreeMap<&str, f64> = BTreeMap::new();
            for (i, step) in op.steps.iter().enumerate() {
                let sat = format!("{at}.steps[{i}]");
                match step {
                    StepSpec::Group { members, timeout_ms } => {
                        self.members(&sat, members, &allowed);
                        if *timeout_ms == 0 {
                            self.push("timeout", &sat, "group timeout must be positive");
                        }
                        for m in members {
                            last.insert(&m.system_id, m.value);
                        }
                    }
                    StepSpec::Condition {
                        until,
                        fail_if,
                        poll_ms,
                        timeout_ms,
                    } => {
                        self.expression(&sat, until, false);
                        if let Some(f) = fail_if {
                            self.expression(&sat, f, false);
                        }
                        if *timeout_ms == 0 || *poll_ms == 0 {
                            self.push("timeout", &sat, "condition timeout and poll period must be positive");
                        }
                    }
                    StepSpec::Delay { duration_ms } => {
                        if *duration_ms == 0 {
                            self.push("timeout", &sat, "delay must be positive");
                        }
                    }
                }
            }
            // a derived restore group returns everything to idle by construction
            let Some(restore) = &op.idle_restore else { continue };
            if !restore.is_empty() {
                self.members(&format!("{at}.idle_restore"), restore, &allowed);
            }
            for m in restore {
                last.insert(&m.system_id, m.value);
            }
            for (id, value) in last {
                if let Some(spec) = self.actuators.get(id) {
                    let b = spec.binding();
                    if (value - b.idle_value).abs() > b.tolerance {
                        self.push("C3", &at, format!("{id} ends at {value}, idle is {}", b.idle_value));
                    }
                }
            }
        }
    }

    fn routines(&mut self) {
        let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
        let mut ids = BTreeSet::new();
        for r in &self.cfg.routines {
            let at = format!("routines[{}]", r.routine_id);
            if !ids.insert(&r.routine_id) {
                self.push("duplicate-id", &at, "routine declared twice");
            }
            let states: BTreeSet<&str> = r.states.iter().map(String::as_str).collect();
            if !states.contains(r.initial.as_str()) {
                self.push("unknown-ref", &at, format!("initial state {} not in states", r.initial));
            }
            if r.eval_period_ms == 0 {
                self.push("timeout", &at, "eval_period_ms must be positive");
            }
            for op in &r.owned_ops {
                if !self.ops.contains_key(op.as_str()) {
                    self.push("unknown-ref", &at, format!("unknown operation {op}"));
                }
                if let Some(other) = owner.insert(op, &r.routine_id) {
                    if other != r.routine_id {
                        self.push("ownership exclusivity", &at, format!("operation {op} is also owned by {other}"));
                    }
                }
            }
            for (i, t) in r.transitions.iter().enumerate() {
                let tat = format!("{at}.transitions[{i}]");
                for s in [&t.from, &t.to] {
                    if !states.contains(s.as_str()) {
                        self.push("unknown-ref", &tat, format!("unknown state {s}"));
                    }
                }
                if !r.owned_ops.contains(&t.op) {
                    self.push("ownership", &tat, format!("operation {} is not owned by the routine", t.op));
                }
                self.expression(&tat, &t.trigger, true);
            }
        }
    }
}

/// Builds the idle restore lists after validation, using binding idle values.
pub fn operations_with_restore(cfg: &PlantConfig) -> Vec<OperationDef> {
    let idle: BTreeMap<&str, f64> = cfg.actuators.iter().map(|a| (a.system_id.as_str(), a.idle_value)).collect();
    cfg.operations
        .iter()
        .map(|op| {
            let mut def = resolve_operation(op);
            def.idle_restore = effective_restore(op, |id| idle.get(id).copied().unwrap_or(0.0));
            def
        })
        .collect()
}

/// JSON schema of the configuration document.
pub fn schema() -> serde_json::Value {
    serde_json::to_value(schemars::schema_for!(PlantConfig)).expect("schema serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
[[devices]]
id = "ctrl-1"
channels = [
  { kind = "valve", io = 1 },
  { kind = "valve", io = 2 },
  { kind = "pump", io = 17 },
]

[[devices]]
id = "station-2"
channels = [{ kind = "sensor", io = 1, signal = { kind = "constant", value = 250.0 } }]

[[actuators]]
system_id = "V1"
kind = "valve"
device = "ctrl-1"
io = 1

[[actuators]]
system_id = "V2"
kind = "valve"
device = "ctrl-1"
io = 2

[[actuators]]
system_id = "P1"
kind = "pump"
device = "ctrl-1"
io = 17

[[sensors]]
system_id = "T1"
device = "station-2"
io = 1

[[resources]]
id = "red"
actuators = ["V1", "P1"]
lockout = [{ system_id = "P1", value = 0 }, { system_id = "V1", value = 0 }]

[[resources]]
id = "blue"
actuators = ["V2"]
lockout = [{ system_id = "V2", value = 0 }]

[[operations]]
op_id = "fill"
resources = ["red"]
priority = 10
steps = [
  { kind = "group", members = [{ system_id = "V1", value = 100 }, { system_id = "P1", value = 1 }] },
  { kind = "condition", until = "T1 >= 100", timeout_ms = 60000 },
]

[[operations]]
op_id = "drain"
resources = ["blue"]
priority = 5
steps = [{ kind = "delay", duration_ms = 1000 }]

[[routines]]
routine_id = "tank"
states = ["idle", "full"]
initial = "idle"
owned_ops = ["fill"]
transitions = [{ from = "idle", trigger = "T1 < 100", op = "fill", to = "full" }]
"#;

    fn codes(cfg: &PlantConfig) -> Vec<&'static str> {
        cfg.validate().iter().map(|v| v.code).collect()
    }

    #[test]
    fn small_plant_is_valid() {
        let cfg = PlantConfig::parse(SMALL).unwrap();
        assert_eq!(cfg.validate(), vec![]);
        let resolved = cfg.resolve().unwrap();
        assert_eq!(resolved.operations.len(), 2);
        let ops = operations_with_restore(&cfg);
        assert_eq!(ops[0].idle_restore, vec![GroupMember::new("V1", 0.0), GroupMember::new("P1", 0.0)]);
    }

    #[test]
    fn duplicate_priority_is_reported() {
        let mut cfg = PlantConfig::parse(SMALL).unwrap();
        cfg.operations[1].priority = 10;
        assert_eq!(codes(&cfg), vec!["P not unique"]);
    }

    #[test]
    fn out_of_boundary_step_is_c2() {
        let mut cfg = PlantConfig::parse(SMALL).unwrap();
        cfg.operations[1].steps.push(StepSpec::Group {
            members: vec![GroupMember::new("V1", 0.0)],
            timeout_ms: 1000,
        });
        assert_eq!(codes(&cfg), vec!["C2"]);
    }

    #[test]
    fn shared_ownership_is_reported() {
        let mut cfg = PlantConfig::parse(SMALL).unwrap();
        let mut other = cfg.routines[0].clone();
        other.routine_id = "other".into();
        cfg.routines.push(other);
        assert_eq!(codes(&cfg), vec!["ownership exclusivity"]);
    }

    #[test]
    fn explicit_restore_leaving_actuator_open_is_c3() {
        let mut cfg = PlantConfig::parse(SMALL).unwrap();
        cfg.operations[0].idle_restore = Some(vec![GroupMember::new("V1", 0.0)]);
        assert_eq!(codes(&cfg), vec!["C3"]);
    }

    #[test]
    fn violations_are_exhaustive() {
        let mut cfg = PlantConfig::parse(SMALL).unwrap();
        cfg.operations[1].priority = 10;
        cfg.operations[1].resources.push("green".into());
        cfg.routines[0].owned_ops.push("ghost".into());
        cfg.resources[1].lockout.push(GroupMember::new("V1", 0.0));
        let c = codes(&cfg);
        assert!(c.contains(&"P not unique"));
        assert!(c.contains(&"lockout"));
        assert_eq!(c.iter().filter(|c| **c == "unknown-ref").count(), 2);
    }

    #[test]
    fn bad_expression_and_unknown_sensor() {
        let mut cfg = PlantConfig::parse(SMALL).unwrap();
        cfg.routines[0].transitions[0].trigger = "T1 <".into();
        cfg.operations[0].steps[1] = StepSpec::Condition {
            until: "T9 > 1".into(),
            fail_if: None,
            poll_ms: 1000,
            timeout_ms: 1000,
        };
        assert_eq!(codes(&cfg), vec!["unknown-ref", "expression"]);
    }

    #[test]
    fn unordered_trace_is_reported() {
        let src = SMALL.replace(
            r#"signal = { kind = "constant", value = 250.0 }"#,
            r#"signal = { kind = "trace", points = [[10, 1], [5, 2]] }"#,
        );
        let cfg = PlantConfig::parse(&src).unwrap();
        assert_eq!(codes(&cfg), vec!["signal"]);
    }

    #[test]
    fn parse_error_has_position() {
        let err = PlantConfig::parse("[broker]\nurl = 5\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn validate_is_pure() {
        let cfg = PlantConfig::parse(SMALL).unwrap();
        let mut broken = cfg.clone();
        broken.operations[1].priority = 10;
        assert_eq!(broken.validate(), broken.validate());
    }
}
