//! Actuator abstraction: system-id ↔ device channel mapping, command life
//! cycle tracking, tolerance-based report-by-exception and the periodic fault
//! handler.
//!
//! The layer is sans-IO. [`ActuatorLayer::dispatch`] returns the command
//! envelope to publish and [`ActuatorLayer::ingest_feedback`] consumes state
//! envelopes; the caller owns the transport.

use std::collections::{BTreeMap, BTreeSet};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::wire::{cmd_topic, encode, CmdPayload};
use crate::bus::{Envelope, Qos};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum ActuatorKind {
    Valve,
    Pump,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ActuatorBinding {
    pub system_id: String,
    pub kind: ActuatorKind,
    pub device: String,
    pub io: u32,
    /// Engineering units; percent of span for valves.
    pub tolerance: f64,
    pub idle_value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Idle,
    Pending,
    Moving,
    Stopped,
}

impl Phase {
    /// Allowed edges: the nominal cycle, `pending → stopped` for commands that
    /// need no travel, and `pending|moving → idle` when a command is
    /// superseded (lockout overrides).
    pub fn can_transition(self, to: Phase) -> bool {
        use Phase::*;
        matches!(
            (self, to),
            (Idle, Pending) | (Pending, Moving) | (Pending, Stopped) | (Moving, Stopped) | (Stopped, Idle) | (Pending, Idle) | (Moving, Idle)
        )
    }

    pub fn is_active(self) -> bool {
        matches!(self, Phase::Pending | Phase::Moving)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultType {
    Stalled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultInfo {
    pub fault_type: FaultType,
    pub detected_ts: u64,
    pub call_token: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feedback {
    pub value: f64,
    pub recv_ts: u64,
}

/// Live state of one actuator.
#[derive(Debug, Clone, PartialEq)]
pub struct ActuatorRecord {
    pub system_id: String,
    pub target: f64,
    pub phase: Phase,
    pub last_feedback: Option<Feedback>,
    pub call_token: Option<String>,
    pub fault: Option<FaultInfo>,
    /// Issuance time of the active command.
    pub dispatched_ts: u64,
    /// Feedback value when the active command was issued.
    pub origin: f64,
    pub retries: u32,
    escalated: bool,
}

impl ActuatorRecord {
    fn new(binding: &ActuatorBinding) -> Self {
        Self {
            system_id: binding.system_id.clone(),
            target: binding.idle_value,
            phase: Phase::Idle,
            last_feedback: None,
            call_token: None,
            fault: None,
            dispatched_ts: 0,
            origin: binding.idle_value,
            retries: 0,
            escalated: false,
        }
    }

    fn set_phase(&mut self, to: Phase) {
        debug_assert!(self.phase.can_transition(to), "{:?} -> {:?}", self.phase, to);
        self.phase = to;
    }
}

/// Retry/escalation thresholds for one actuator kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct KindPolicy {
    #[serde(default = "default_retry_after")]
    pub retry_after_ms: u64,
    #[serde(default = "default_escalate_after")]
    pub escalate_after_ms: u64,
}

fn default_retry_after() -> u64 {
    3_000
}

fn default_escalate_after() -> u64 {
    10_000
}

impl Default for KindPolicy {
    fn default() -> Self {
        Self {
            retry_after_ms: default_retry_after(),
            escalate_after_ms: default_escalate_after(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ActuatorError {
    #[error("unknown actuator {0:?}")]
    Unknown(String),
    #[error("actuator {0:?} is fault-locked")]
    FaultLocked(String),
    #[error("duplicate binding: {0}")]
    DuplicateBinding(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DispatchMode {
    Normal,
    /// Safe-state commands: bypass fault locks and supersede any active command.
    Lockout,
}

/// Result of dispatching one command.
#[derive(Debug, Clone, PartialEq)]
pub struct Dispatched {
    pub envelope: Envelope,
    /// Token of an active command that this dispatch superseded.
    pub superseded: Option<String>,
    pub origin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub system_id: String,
    pub call_token: String,
}

/// What [`ActuatorLayer::ingest_feedback`] did with one state envelope.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeedbackOutcome {
    pub system_id: String,
    /// Value passed report-by-exception.
    pub accepted: bool,
    /// The active command departed its origin on this sample.
    pub moved: bool,
    pub completion: Option<Completion>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FaultAction {
    /// Republish of the active command.
    Retry { system_id: String, envelope: Envelope },
    /// The command is abandoned; it will never complete on its own.
    Escalated { system_id: String, call_token: String, fault: FaultInfo },
}

pub struct ActuatorLayer {
    bindings: BTreeMap<String, ActuatorBinding>,
    by_channel: BTreeMap<(String, u32), String>,
    records: BTreeMap<String, ActuatorRecord>,
    locked: BTreeSet<String>,
    policies: BTreeMap<ActuatorKind, KindPolicy>,
}

impl ActuatorLayer {
    pub fn new(bindings: impl IntoIterator<Item = ActuatorBinding>) -> Result<Self, ActuatorError> {
        let mut layer = Self {
            bindings: BTreeMap::new(),
            by_channel: BTreeMap::new(),
            records: BTreeMap::new(),
            locked: BTreeSet::new(),
            policies: BTreeMap::new(),
        };
        for b in bindings {
            if layer.bindings.contains_key(&b.system_id) {
                return Err(ActuatorError::DuplicateBinding(b.system_id));
            }
            let key = (b.device.clone(), b.io);
            if layer.by_channel.contains_key(&key) {
                return Err(ActuatorError::DuplicateBinding(format!("{}/io/{}", b.device, b.io)));
            }
            layer.by_channel.insert(key, b.system_id.clone());
            layer.records.insert(b.system_id.clone(), ActuatorRecord::new(&b));
            layer.bindings.insert(b.system_id.clone(), b);
        }
        Ok(layer)
    }

    pub fn set_policy(&mut self, kind: ActuatorKind, policy: KindPolicy) {
        self.policies.insert(kind, policy);
    }

    pub fn policy(&self, kind: ActuatorKind) -> KindPolicy {
        self.policies.get(&kind).copied().unwrap_or_default()
    }

    pub fn binding(&self, system_id: &str) -> Option<&ActuatorBinding> {
        self.bindings.get(system_id)
    }

    pub fn bindings(&self) -> impl Iterator<Item = &ActuatorBinding> {
        self.bindings.values()
    }

    pub fn record(&self, system_id: &str) -> Option<&ActuatorRecord> {
        self.records.get(system_id)
    }

    pub fn records(&self) -> impl Iterator<Item = &ActuatorRecord> {
        self.records.values()
    }

    pub fn system_id_for(&self, device: &str, io: u32) -> Option<&str> {
        self.by_channel.get(&(device.to_string(), io)).map(String::as_str)
    }

    pub fn is_fault_locked(&self, system_id: &str) -> bool {
        self.locked.contains(system_id) || self.records.get(system_id).is_some_and(|r| r.fault.is_some())
    }

    /// Marks actuators as belonging to a faulted resource.
    pub fn lock(&mut self, system_id: &str) {
        self.locked.insert(system_id.to_string());
    }

    /// Lifts a resource lock and forgets any recorded actuator fault.
    pub fn unlock(&mut self, system_id: &str) {
        self.locked.remove(system_id);
        if let Some(r) = self.records.get_mut(system_id) {
            r.fault = None;
            r.escalated = false;
        }
    }

    /// Checks that a normal dispatch would be admitted.
    pub fn check_dispatchable(&self, system_id: &str) -> Result<(), ActuatorError> {
        if !self.bindings.contains_key(system_id) {
            return Err(ActuatorError::Unknown(system_id.to_string()));
        }
        if self.is_fault_locked(system_id) {
            return Err(ActuatorError::FaultLocked(system_id.to_string()));
        }
        Ok(())
    }

    pub fn dispatch(&mut self, system_id: &str, value: f64, call_token: &str, now_ms: u64) -> Result<Dispatched, ActuatorError> {
        self.dispatch_with(system_id, value, call_token, now_ms, DispatchMode::Normal)
    }

    pub fn dispatch_with(
        &mut self,
        system_id: &str,
        value: f64,
        call_token: &str,
        now_ms: u64,
        mode: DispatchMode,
    ) -> Result<Dispatched, ActuatorError> {
        if mode == DispatchMode::Normal {
            self.check_dispatchable(system_id)?;
        }
        let binding = self
            .bindings
            .get(system_id)
            .ok_or_else(|| ActuatorError::Unknown(system_id.to_string()))?;
        let record = self.records.get_mut(system_id).expect("record per binding");
        let superseded = if record.phase.is_active() {
            record.set_phase(Phase::Idle);
            record.call_token.take()
        } else {
            None
        };
        if record.phase == Phase::Stopped {
            record.set_phase(Phase::Idle);
        }
        record.origin = record.last_feedback.map(|f| f.value).unwrap_or(binding.idle_value);
        record.target = value;
        record.call_token = Some(call_token.to_string());
        record.dispatched_ts = now_ms;
        record.retries = 0;
        record.escalated = false;
        record.set_phase(Phase::Pending);
        Ok(Dispatched {
            envelope: command_envelope(binding, value, call_token, now_ms),
            superseded,
            origin: record.origin,
        })
    }

    /// Applies one feedback sample. Returns `None` for channels with no binding.
    pub fn ingest_feedback(&mut self, device: &str, io: u32, value: f64, recv_ts: u64) -> Option<FeedbackOutcome> {
        let system_id = self.by_channel.get(&(device.to_string(), io))?.clone();
        let binding = &self.bindings[&system_id];
        let tol = binding.tolerance;
        let kind = binding.kind;
        let record = self.records.get_mut(&system_id).expect("record per binding");
        let mut out = FeedbackOutcome {
            system_id,
            ..Default::default()
        };

        let unchanged = record.last_feedback.is_some_and(|f| (f.value - value).abs() <= tol);
        if unchanged {
            // A command whose target already matches the settled value
            // completes on the next sample even though the value is filtered.
            let settled = record.last_feedback.map(|f| f.value).unwrap_or(value);
            if record.phase == Phase::Pending && (settled - record.target).abs() <= tol {
                out.completion = complete(record);
            }
            return Some(out);
        }

        out.accepted = true;
        record.last_feedback = Some(Feedback { value, recv_ts });
        if record.phase == Phase::Pending && kind == ActuatorKind::Valve && (value - record.origin).abs() > tol {
            record.set_phase(Phase::Moving);
            out.moved = true;
        }
        if record.phase.is_active() && (value - record.target).abs() <= tol {
            if record.phase == Phase::Pending && kind == ActuatorKind::Pump && (value - record.origin).abs() > tol {
                out.moved = true;
            }
            out.completion = complete(record);
        }
        Some(out)
    }

    /// One pass of the fault handler over all active commands.
    pub fn fault_scan(&mut self, now_ms: u64) -> Vec<FaultAction> {
        let mut actions = Vec::new();
        for (id, record) in self.records.iter_mut() {
            if !record.phase.is_active() || record.escalated {
                continue;
            }
            let binding = &self.bindings[id];
            let policy = self.policies.get(&binding.kind).copied().unwrap_or_default();
            let elapsed = now_ms.saturating_sub(record.dispatched_ts);
            let token = record.call_token.clone().expect("active record carries a token");
            if elapsed >= policy.escalate_after_ms {
                let fault = FaultInfo {
                    fault_type: FaultType::Stalled,
                    detected_ts: now_ms,
                    call_token: token.clone(),
                };
                record.fault = Some(fault.clone());
                record.escalated = true;
                actions.push(FaultAction::Escalated {
                    system_id: id.clone(),
                    call_token: token,
                    fault,
                });
            } else if elapsed >= policy.retry_after_ms && record.phase == Phase::Pending && record.retries == 0 {
                record.retries = 1;
                actions.push(FaultAction::Retry {
                    system_id: id.clone(),
                    envelope: command_envelope(binding, record.target, &token, now_ms),
                });
            }
        }
        actions
    }
}

fn complete(record: &mut ActuatorRecord) -> Option<Completion> {
    let call_token = record.call_token.take()?;
    record.set_phase(Phase::Stopped);
    Some(Completion {
        system_id: record.system_id.clone(),
        call_token,
    })
}

/// Commands are at-least-once and retained, so a reconnecting device is
/// replayed the latest desired value for every channel.
fn command_envelope(binding: &ActuatorBinding, value: f64, token: &str, now_ms: u64) -> Envelope {
    let payload = encode(&CmdPayload {
        value,
        ts: now_ms,
        token: token.to_string(),
    });
    Envelope::new(cmd_topic(&binding.device, binding.io), payload, Qos::AtLeastOnce, now_ms).retained()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn valve(id: &str, io: u32) -> ActuatorBinding {
        ActuatorBinding {
            system_id: id.into(),
            kind: ActuatorKind::Valve,
            device: "ctrl-1".into(),
            io,
            tolerance: 2.0,
            idle_value: 0.0,
        }
    }

    fn pump() -> ActuatorBinding {
        ActuatorBinding {
            system_id: "P1".into(),
            kind: ActuatorKind::Pump,
            device: "ctrl-1".into(),
            io: 17,
            tolerance: 0.5,
            idle_value: 0.0,
        }
    }

    fn layer() -> ActuatorLayer {
        ActuatorLayer::new([valve("V07", 7), valve("V08", 8), pump()]).unwrap()
    }

    #[test]
    fn dispatch_publishes_and_marks_pending() {
        let mut l = layer();
        let d = l.dispatch("V07", 100.0, "tok-1", 1_000).unwrap();
        assert_eq!(d.envelope.topic, "dev/ctrl-1/io/7/cmd");
        assert_eq!(d.envelope.qos, Qos::AtLeastOnce);
        let r = l.record("V07").unwrap();
        assert_eq!((r.phase, r.target, r.call_token.as_deref()), (Phase::Pending, 100.0, Some("tok-1")));
    }

    #[test]
    fn pump_command_is_relay_on() {
        let mut l = layer();
        let d = l.dispatch("P1", 1.0, "tok-p", 0).unwrap();
        assert_eq!(d.envelope.topic, "dev/ctrl-1/io/17/cmd");
        assert!(d.envelope.payload_str().unwrap().starts_with(r#"{"value":1,"#));
    }

    #[test]
    fn fault_locked_dispatch_rejected() {
        let mut l = layer();
        l.lock("V07");
        assert_eq!(l.dispatch("V07", 100.0, "t", 0), Err(ActuatorError::FaultLocked("V07".into())));
        assert_eq!(l.record("V07").unwrap().phase, Phase::Idle);
        assert!(matches!(l.dispatch("NOPE", 1.0, "t", 0), Err(ActuatorError::Unknown(_))));
        // lockout path bypasses the lock
        assert!(l.dispatch_with("V07", 0.0, "lk", 0, DispatchMode::Lockout).is_ok());
    }

    #[test]
    fn departure_then_completion_within_tolerance() {
        let mut l = layer();
        l.ingest_feedback("ctrl-1", 7, 0.0, 0);
        l.dispatch("V07", 100.0, "tok-1", 0).unwrap();
        let o = l.ingest_feedback("ctrl-1", 7, 25.0, 1_000).unwrap();
        assert!(o.moved && o.completion.is_none());
        assert_eq!(l.record("V07").unwrap().phase, Phase::Moving);
        let o = l.ingest_feedback("ctrl-1", 7, 98.7, 4_000).unwrap();
        assert_eq!(
            o.completion,
            Some(Completion {
                system_id: "V07".into(),
                call_token: "tok-1".into()
            })
        );
        assert_eq!(l.record("V07").unwrap().phase, Phase::Stopped);
        assert_eq!(l.record("V07").unwrap().call_token, None);
    }

    #[test]
    fn report_by_exception_suppresses_repeats() {
        let mut l = layer();
        assert!(l.ingest_feedback("ctrl-1", 8, 50.0, 0).unwrap().accepted);
        assert!(!l.ingest_feedback("ctrl-1", 8, 50.0, 1_000).unwrap().accepted);
        assert!(!l.ingest_feedback("ctrl-1", 8, 51.5, 2_000).unwrap().accepted);
        assert!(l.ingest_feedback("ctrl-1", 8, 53.0, 3_000).unwrap().accepted);
        assert!(l.ingest_feedback("ctrl-9", 8, 53.0, 3_000).is_none());
    }

    #[test]
    fn command_to_current_position_completes_on_next_sample() {
        let mut l = layer();
        l.ingest_feedback("ctrl-1", 7, 0.0, 0);
        l.dispatch("V07", 0.0, "tok-z", 10).unwrap();
        let o = l.ingest_feedback("ctrl-1", 7, 0.0, 1_000).unwrap();
        assert!(!o.accepted);
        assert_eq!(o.completion.unwrap().call_token, "tok-z");
    }

    #[test]
    fn completion_emitted_once_under_duplicates() {
        let mut l = layer();
        l.ingest_feedback("ctrl-1", 7, 0.0, 0);
        l.dispatch("V07", 100.0, "tok", 0).unwrap();
        let mut completions = 0;
        for v in [25.0, 50.0, 75.0, 100.0, 100.0, 100.0, 99.5] {
            if l.ingest_feedback("ctrl-1", 7, v, 0).unwrap().completion.is_some() {
                completions += 1;
            }
        }
        assert_eq!(completions, 1);
    }

    #[test]
    fn pump_skips_moving() {
        let mut l = layer();
        l.ingest_feedback("ctrl-1", 17, 0.0, 0);
        l.dispatch("P1", 1.0, "tok", 0).unwrap();
        let o = l.ingest_feedback("ctrl-1", 17, 1.0, 1_000).unwrap();
        assert!(o.completion.is_some());
    }

    #[test]
    fn stuck_command_retries_once_then_escalates() {
        let mut l = layer();
        l.ingest_feedback("ctrl-1", 7, 0.0, 0);
        l.dispatch("V07", 100.0, "tok", 0).unwrap();
        assert!(l.fault_scan(2_000).is_empty());
        let a = l.fault_scan(3_000);
        assert!(matches!(&a[..], [FaultAction::Retry { system_id, .. }] if system_id == "V07"));
        assert!(l.fault_scan(4_000).is_empty());
        let a = l.fault_scan(10_000);
        assert!(matches!(&a[..], [FaultAction::Escalated { call_token, .. }] if call_token == "tok"));
        assert!(l.record("V07").unwrap().fault.is_some());
        assert!(l.fault_scan(20_000).is_empty());
        assert!(l.is_fault_locked("V07"));
        l.unlock("V07");
        assert!(!l.is_fault_locked("V07"));
    }

    #[test]
    fn healthy_fleet_scan_is_noop() {
        let mut l = layer();
        assert!(l.fault_scan(1_000_000).is_empty());
    }

    #[test]
    fn lockout_supersedes_active_command() {
        let mut l = layer();
        l.dispatch("V07", 100.0, "op", 0).unwrap();
        let d = l.dispatch_with("V07", 0.0, "lk", 5, DispatchMode::Lockout).unwrap();
        assert_eq!(d.superseded.as_deref(), Some("op"));
        assert_eq!(l.record("V07").unwrap().call_token.as_deref(), Some("lk"));
    }

    #[test]
    fn duplicate_bindings_rejected() {
        assert!(ActuatorLayer::new([valve("V1", 1), valve("V1", 2)]).is_err());
        assert!(ActuatorLayer::new([valve("V1", 1), valve("V2", 1)]).is_err());
    }
}
