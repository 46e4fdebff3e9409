//! Shared state of the server-side layers and the effects they produce.
//!
//! Engines mutate a [`Plane`] and leave outgoing envelopes and log records
//! behind; the runtime drains both after every step.

use std::collections::{BTreeMap, BTreeSet};

use crate::actuator::{ActuatorKind, ActuatorLayer, DispatchMode, FaultAction};
use crate::bus::Envelope;
use crate::condition::SensorContext;
use crate::group::{GroupCompletion, GroupError, GroupLayer, GroupMember, GroupRequest, MemberUpdate};
use crate::interlock::Interlock;
use crate::metrics::{EventRecord, Layer};

/// Monotonic per-prefix counters producing `prefix-000042` style tokens.
#[derive(Debug, Default, Clone)]
pub struct TokenGen {
    counters: BTreeMap<String, u64>,
}

impl TokenGen {
    pub fn next(&mut self, prefix: &str) -> String {
        let n = self.counters.entry(prefix.to_string()).or_insert(0);
        *n += 1;
        format!("{prefix}-{n:06}")
    }
}

pub struct Plane {
    pub actuators: ActuatorLayer,
    pub groups: GroupLayer,
    pub interlock: Interlock,
    pub sensors: SensorContext,
    /// Actuators assigned to each resource.
    pub resource_actuators: BTreeMap<String, BTreeSet<String>>,
    /// Sensor system ids by device channel.
    pub sensor_channels: BTreeMap<(String, u32), String>,
    /// Latched external trigger names.
    pub externals: BTreeSet<String>,
    pub tokens: TokenGen,
    outbox: Vec<Envelope>,
    events: Vec<EventRecord>,
}

impl Plane {
    pub fn new(actuators: ActuatorLayer, interlock: Interlock, resource_actuators: BTreeMap<String, BTreeSet<String>>) -> Self {
        Self {
            actuators,
            groups: GroupLayer::new(),
            interlock,
            sensors: SensorContext::new(),
            resource_actuators,
            sensor_channels: BTreeMap::new(),
            externals: BTreeSet::new(),
            tokens: TokenGen::default(),
            outbox: Vec::new(),
            events: Vec::new(),
        }
    }

    pub fn publish(&mut self, env: Envelope) {
        self.outbox.push(env);
    }

    pub fn log(&mut self, rec: EventRecord) {
        self.events.push(rec);
    }

    pub fn take_outbox(&mut self) -> Vec<Envelope> {
        std::mem::take(&mut self.outbox)
    }

    pub fn take_events(&mut self) -> Vec<EventRecord> {
        std::mem::take(&mut self.events)
    }

    /// Dispatches a group through the actuator layer, publishing one command per member.
    pub fn issue_group(&mut self, token: &str, members: &[GroupMember], mode: DispatchMode, now: u64) -> Result<(), GroupError> {
        let req = GroupRequest {
            group_token: token.to_string(),
            members: members.to_vec(),
            issued_ts: now,
        };
        let dispatched = match self.groups.dispatch_group(&req, &mut self.actuators, mode) {
            Ok(d) => d,
            Err(e) => {
                self.log(EventRecord::new(now, Layer::Group, "rejected", token).token(token).attr("error", e.to_string()));
                return Err(e);
            }
        };
        let mode_name = match mode {
            DispatchMode::Normal => "normal",
            DispatchMode::Lockout => "lockout",
        };
        self.log(
            EventRecord::new(now, Layer::Group, "dispatch", token)
                .token(token)
                .attr("members", members.len())
                .attr("mode", mode_name),
        );
        for (id, d) in dispatched {
            if let Some(old) = &d.superseded {
                self.log(EventRecord::new(now, Layer::Actuator, "superseded", &id).token(old));
            }
            let kind = match self.actuators.binding(&id).map(|b| b.kind) {
                Some(ActuatorKind::Pump) => "pump",
                _ => "valve",
            };
            let target = self.actuators.record(&id).map(|r| r.target).unwrap_or_default();
            self.log(
                EventRecord::new(now, Layer::Actuator, "dispatch", &id)
                    .token(token)
                    .attr("target", target)
                    .attr("origin", d.origin)
                    .attr("kind", kind)
                    .attr("mode", mode_name),
            );
            self.publish(d.envelope);
        }
        Ok(())
    }

    /// Routes one state sample to the sensor context and the actuator layer.
    /// Returns the group completions it caused.
    pub fn ingest_state(&mut self, device: &str, io: u32, value: f64, recv_ts: u64) -> Vec<GroupCompletion> {
        if let Some(id) = self.sensor_channels.get(&(device.to_string(), io)).cloned() {
            self.sensors.update(&id, value, recv_ts);
        }
        let Some(out) = self.actuators.ingest_feedback(device, io, value, recv_ts) else {
            return Vec::new();
        };
        if out.accepted {
            self.sensors.update(&out.system_id, value, recv_ts);
        }
        if out.moved {
            let token = self
                .actuators
                .record(&out.system_id)
                .and_then(|r| r.call_token.clone())
                .or_else(|| out.completion.as_ref().map(|c| c.call_token.clone()))
                .unwrap_or_default();
            self.log(EventRecord::new(recv_ts, Layer::Actuator, "moving", &out.system_id).token(&token).attr("value", value));
        }
        let Some(done) = out.completion else {
            return Vec::new();
        };
        self.log(EventRecord::new(recv_ts, Layer::Actuator, "complete", &done.system_id).token(&done.call_token).attr("value", value));
        match self.groups.on_member_complete(&done.system_id, &done.call_token) {
            MemberUpdate::Completed(c) => {
                self.log(EventRecord::new(recv_ts, Layer::Group, "complete", &c.group_token).token(&c.group_token));
                vec![c]
            }
            MemberUpdate::Pending { .. } => Vec::new(),
            MemberUpdate::Unknown => {
                tracing::warn!(actuator = %done.system_id, token = %done.call_token, "completion for closed group");
                self.log(EventRecord::new(recv_ts, Layer::Group, "late_completion", &done.system_id).token(&done.call_token));
                Vec::new()
            }
        }
    }

    /// One pass of the actuator fault handler.
    pub fn scan_faults(&mut self, now: u64) {
        for action in self.actuators.fault_scan(now) {
            match action {
                FaultAction::Retry { system_id, envelope } => {
                    let token = self.actuators.record(&system_id).and_then(|r| r.call_token.clone()).unwrap_or_default();
                    self.log(EventRecord::new(now, Layer::Actuator, "retry", &system_id).token(&token));
                    self.publish(envelope);
                }
                FaultAction::Escalated { system_id, call_token, .. } => {
                    tracing::warn!(actuator = %system_id, token = %call_token, "actuator stalled");
                    self.log(EventRecord::new(now, Layer::Actuator, "escalated", &system_id).token(&call_token).attr("fault", "stalled"));
                }
            }
        }
    }

    /// Actuators covered by a set of resources.
    pub fn actuators_of<'a>(&self, resources: impl IntoIterator<Item = &'a String>) -> BTreeSet<String> {
        resources
            .into_iter()
            .filter_map(|r| self.resource_actuators.get(r))
            .flatten()
            .cloned()
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_count_per_prefix() {
        let mut t = TokenGen::default();
        assert_eq!(t.next("run"), "run-000001");
        assert_eq!(t.next("grp"), "grp-000001");
        assert_eq!(t.next("run"), "run-000002");
    }
}
