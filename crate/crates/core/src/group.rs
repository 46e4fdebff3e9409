//! Group commands: the single entry point for actuation. A request fans out
//! into one actuator dispatch per member, all carrying the group's token, and
//! completes once every member has reported completion. No timeouts here; the
//! caller owns those.

use std::collections::{BTreeMap, BTreeSet};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuator::{ActuatorError, ActuatorLayer, DispatchMode, Dispatched};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct GroupMember {
    pub system_id: String,
    pub value: f64,
}

impl GroupMember {
    pub fn new(system_id: impl Into<String>, value: f64) -> Self {
        Self {
            system_id: system_id.into(),
            value,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupRequest {
    pub group_token: String,
    pub members: Vec<GroupMember>,
    pub issued_ts: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupLedgerEntry {
    pub group_token: String,
    pub pending: BTreeSet<String>,
    pub issued_ts: u64,
    pub mode: DispatchMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupCompletion {
    pub group_token: String,
    pub issued_ts: u64,
    pub mode: DispatchMode,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GroupError {
    #[error("group has no members")]
    Empty,
    #[error("actuator {0:?} appears twice in the group")]
    DuplicateMember(String),
    #[error("group token {0:?} already active")]
    DuplicateToken(String),
    #[error(transparent)]
    Actuator(#[from] ActuatorError),
}

/// Effect of one member completion on its group.
#[derive(Debug, Clone, PartialEq)]
pub enum MemberUpdate {
    Pending { remaining: usize },
    Completed(GroupCompletion),
    /// Late or unknown completion; logged and dropped.
    Unknown,
}

#[derive(Debug, Default)]
pub struct GroupLayer {
    ledger: BTreeMap<String, GroupLedgerEntry>,
}

impl GroupLayer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Admits the whole group or nothing, then dispatches members in list order.
    pub fn dispatch_group(
        &mut self,
        req: &GroupRequest,
        actuators: &mut ActuatorLayer,
        mode: DispatchMode,
    ) -> Result<Vec<(String, Dispatched)>, GroupError> {
        if req.members.is_empty() {
            return Err(GroupError::Empty);
        }
        if self.ledger.contains_key(&req.group_token) {
            return Err(GroupError::DuplicateToken(req.group_token.clone()));
        }
        let mut seen = BTreeSet::new();
        for m in &req.members {
            if !seen.insert(m.system_id.as_str()) {
                return Err(GroupError::DuplicateMember(m.system_id.clone()));
            }
            match mode {
                DispatchMode::Normal => actuators.check_dispatchable(&m.system_id)?,
                DispatchMode::Lockout => {
                    if actuators.binding(&m.system_id).is_none() {
                        return Err(ActuatorError::Unknown(m.system_id.clone()).into());
                    }
                }
            }
        }
        let mut out = Vec::with_capacity(req.members.len());
        for m in &req.members {
            let d = actuators.dispatch_with(&m.system_id, m.value, &req.group_token, req.issued_ts, mode)?;
            out.push((m.system_id.clone(), d));
        }
        self.ledger.insert(
            req.group_token.clone(),
            GroupLedgerEntry {
                group_token: req.group_token.clone(),
                pending: req.members.iter().map(|m| m.system_id.clone()).collect(),
                issued_ts: req.issued_ts,
                mode,
            },
        );
        Ok(out)
    }

    pub fn on_member_complete(&mut self, system_id: &str, group_token: &str) -> MemberUpdate {
        let Some(entry) = self.ledger.get_mut(group_token) else {
            return MemberUpdate::Unknown;
        };
        if !entry.pending.remove(system_id) {
            return MemberUpdate::Unknown;
        }
        if entry.pending.is_empty() {
            let entry = self.ledger.remove(group_token).expect("present");
            MemberUpdate::Completed(GroupCompletion {
                group_token: entry.group_token,
                issued_ts: entry.issued_ts,
                mode: entry.mode,
            })
        } else {
            MemberUpdate::Pending {
                remaining: entry.pending.len(),
            }
        }
    }

    /// Drops a group whose caller gave up; later member completions are ignored.
    pub fn abandon(&mut self, group_token: &str) -> Option<GroupLedgerEntry> {
        self.ledger.remove(group_token)
    }

    pub fn entry(&self, group_token: &str) -> Option<&GroupLedgerEntry> {
        self.ledger.get(group_token)
    }

    pub fn active(&self) -> usize {
        self.ledger.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actuator::{ActuatorBinding, ActuatorKind};

    fn actuators() -> ActuatorLayer {
        let mut b: Vec<_> = (1..=2)
            .map(|i| ActuatorBinding {
                system_id: format!("V0{i}"),
                kind: ActuatorKind::Valve,
                device: "ctrl-1".into(),
                io: i,
                tolerance: 2.0,
                idle_value: 0.0,
            })
            .collect();
        b.push(ActuatorBinding {
            system_id: "P1".into(),
            kind: ActuatorKind::Pump,
            device: "ctrl-1".into(),
            io: 17,
            tolerance: 0.5,
            idle_value: 0.0,
        });
        ActuatorLayer::new(b).unwrap()
    }

    fn req(token: &str, members: &[(&str, f64)]) -> GroupRequest {
        GroupRequest {
            group_token: token.into(),
            members: members.iter().map(|(id, v)| GroupMember::new(*id, *v)).collect(),
            issued_ts: 0,
        }
    }

    #[test]
    fn completes_after_last_member() {
        let mut acts = actuators();
        let mut groups = GroupLayer::new();
        let sent = groups
            .dispatch_group(&req("g1", &[("V01", 100.0), ("V02", 0.0), ("P1", 1.0)]), &mut acts, DispatchMode::Normal)
            .unwrap();
        let order: Vec<_> = sent.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(order, ["V01", "V02", "P1"]);
        assert_eq!(groups.on_member_complete("V01", "g1"), MemberUpdate::Pending { remaining: 2 });
        assert_eq!(groups.on_member_complete("P1", "g1"), MemberUpdate::Pending { remaining: 1 });
        assert!(matches!(groups.on_member_complete("V02", "g1"), MemberUpdate::Completed(c) if c.group_token == "g1"));
        assert_eq!(groups.active(), 0);
        assert_eq!(groups.on_member_complete("V02", "g1"), MemberUpdate::Unknown);
    }

    #[test]
    fn fault_locked_member_rejects_whole_group() {
        let mut acts = actuators();
        acts.lock("V02");
        let mut groups = GroupLayer::new();
        let err = groups
            .dispatch_group(&req("g1", &[("V01", 100.0), ("V02", 100.0)]), &mut acts, DispatchMode::Normal)
            .unwrap_err();
        assert_eq!(err, GroupError::Actuator(ActuatorError::FaultLocked("V02".into())));
        assert_eq!(acts.record("V01").unwrap().phase, crate::actuator::Phase::Idle);
        assert!(groups.entry("g1").is_none());
    }

    #[test]
    fn rejects_malformed_requests() {
        let mut acts = actuators();
        let mut groups = GroupLayer::new();
        assert_eq!(groups.dispatch_group(&req("g", &[]), &mut acts, DispatchMode::Normal), Err(GroupError::Empty));
        assert!(matches!(
            groups.dispatch_group(&req("g", &[("V01", 1.0), ("V01", 2.0)]), &mut acts, DispatchMode::Normal),
            Err(GroupError::DuplicateMember(_))
        ));
    }

    #[test]
    fn abandoned_group_ignores_late_completion() {
        let mut acts = actuators();
        let mut groups = GroupLayer::new();
        groups.dispatch_group(&req("g", &[("V01", 100.0)]), &mut acts, DispatchMode::Normal).unwrap();
        assert!(groups.abandon("g").is_some());
        assert_eq!(groups.on_member_complete("V01", "g"), MemberUpdate::Unknown);
    }
}
