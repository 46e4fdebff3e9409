//! Resource interlock: all-or-nothing acquisition of resource sets with a
//! priority queue, fault isolation and an elapsed-time watchdog.
//!
//! Every method is one atomic step over [`InterlockState`]. Acquisition never
//! takes a partial set, so hold-and-wait cycles cannot form; there is no
//! deadlock detection. Starvation of low priorities is possible and surfaces
//! only through watchdog warnings.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::group::GroupMember;

pub type ResourceId = String;
pub type OpId = String;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "state", content = "op_id")]
pub enum Owner {
    Free,
    Fault,
    Op(OpId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueueEntry {
    pub op_id: OpId,
    pub wanted: BTreeSet<ResourceId>,
    pub priority: i64,
    pub call_token: String,
    pub enqueued_ts: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grant {
    pub op_id: OpId,
    pub call_token: String,
    pub resources: BTreeSet<ResourceId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AcquireOutcome {
    Granted(Grant),
    Enqueued,
    /// The op already waits in the queue; the request is swallowed.
    AlreadyQueued,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReleaseOutcome {
    /// The releaser's own token, returned as confirmation.
    pub released: String,
    pub freed: Vec<ResourceId>,
    /// Queued acquisitions granted by this release, in grant order.
    pub granted: Vec<Grant>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaultOutcome {
    pub confirmed: String,
    pub faulted: Vec<ResourceId>,
    /// Safe-state group per faulted resource.
    pub lockouts: Vec<(ResourceId, Vec<GroupMember>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WarningKind {
    QueuedTooLong,
    HeldTooLong,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Warning {
    pub kind: WarningKind,
    pub op_id: OpId,
    pub since_ts: u64,
    pub elapsed_ms: u64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InterlockError {
    #[error("operation {0:?} has no registered priority")]
    UnknownOp(OpId),
    #[error("unknown resource {0:?}")]
    UnknownResource(ResourceId),
    #[error("acquire with an empty resource set")]
    EmptyRequest,
    #[error("priority {priority} of {op_id:?} is already used by {holder:?}")]
    DuplicatePriority { op_id: OpId, priority: i64, holder: OpId },
    #[error("resource {0:?} is not faulted")]
    NotFaulted(ResourceId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WatchdogThresholds {
    pub queue_warn_ms: u64,
    pub hold_warn_ms: u64,
}

impl Default for WatchdogThresholds {
    fn default() -> Self {
        Self {
            queue_warn_ms: 600_000,
            hold_warn_ms: 3_600_000,
        }
    }
}

/// Ownership map, priority queue and the static tables they refer to.
#[derive(Debug, Clone)]
pub struct InterlockState {
    owners: BTreeMap<ResourceId, Owner>,
    /// Kept sorted by descending priority.
    queue: Vec<QueueEntry>,
    priorities: BTreeMap<OpId, i64>,
    lockouts: BTreeMap<ResourceId, Vec<GroupMember>>,
    held_since: BTreeMap<OpId, u64>,
    warned: BTreeSet<(WarningKind, OpId, u64)>,
    thresholds: WatchdogThresholds,
}

pub type Interlock = InterlockState;

impl InterlockState {
    pub fn new(resources: impl IntoIterator<Item = ResourceId>) -> Self {
        Self {
            owners: resources.into_iter().map(|r| (r, Owner::Free)).collect(),
            queue: Vec::new(),
            priorities: BTreeMap::new(),
            lockouts: BTreeMap::new(),
            held_since: BTreeMap::new(),
            warned: BTreeSet::new(),
            thresholds: WatchdogThresholds::default(),
        }
    }

    pub fn set_thresholds(&mut self, thresholds: WatchdogThresholds) {
        self.thresholds = thresholds;
    }

    /// Registers an operation priority. Priorities are unique plant-wide.
    pub fn register(&mut self, op_id: &str, priority: i64) -> Result<(), InterlockError> {
        if let Some((holder, _)) = self.priorities.iter().find(|(o, p)| **p == priority && o.as_str() != op_id) {
            return Err(InterlockError::DuplicatePriority {
                op_id: op_id.to_string(),
                priority,
                holder: holder.clone(),
            });
        }
        self.priorities.insert(op_id.to_string(), priority);
        Ok(())
    }

    pub fn set_lockout(&mut self, resource: &str, plan: Vec<GroupMember>) -> Result<(), InterlockError> {
        if !self.owners.contains_key(resource) {
            return Err(InterlockError::UnknownResource(resource.to_string()));
        }
        self.lockouts.insert(resource.to_string(), plan);
        Ok(())
    }

    pub fn owner(&self, resource: &str) -> Option<&Owner> {
        self.owners.get(resource)
    }

    pub fn owners(&self) -> &BTreeMap<ResourceId, Owner> {
        &self.owners
    }

    pub fn queue(&self) -> &[QueueEntry] {
        &self.queue
    }

    pub fn priority(&self, op_id: &str) -> Option<i64> {
        self.priorities.get(op_id).copied()
    }

    pub fn is_queued(&self, op_id: &str) -> bool {
        self.queue.iter().any(|q| q.op_id == op_id)
    }

    pub fn owned_by(&self, op_id: &str) -> BTreeSet<ResourceId> {
        self.owners
            .iter()
            .filter(|(_, o)| matches!(o, Owner::Op(id) if id == op_id))
            .map(|(r, _)| r.clone())
            .collect()
    }

    fn all_free<'a>(&self, mut wanted: impl Iterator<Item = &'a ResourceId>) -> bool {
        wanted.all(|r| self.owners.get(r) == Some(&Owner::Free))
    }

    fn assign(&mut self, op_id: &str, resources: &BTreeSet<ResourceId>, now_ms: u64) {
        for r in resources {
            self.owners.insert(r.clone(), Owner::Op(op_id.to_string()));
        }
        self.held_since.entry(op_id.to_string()).or_insert(now_ms);
    }

    pub fn acquire(
        &mut self,
        op_id: &str,
        wanted: &BTreeSet<ResourceId>,
        call_token: &str,
        now_ms: u64,
    ) -> Result<AcquireOutcome, InterlockError> {
        let priority = self.priority(op_id).ok_or_else(|| InterlockError::UnknownOp(op_id.to_string()))?;
        if wanted.is_empty() {
            return Err(InterlockError::EmptyRequest);
        }
        if let Some(r) = wanted.iter().find(|r| !self.owners.contains_key(*r)) {
            return Err(InterlockError::UnknownResource(r.clone()));
        }
        if self.all_free(wanted.iter()) {
            self.assign(op_id, wanted, now_ms);
            return Ok(AcquireOutcome::Granted(Grant {
                op_id: op_id.to_string(),
                call_token: call_token.to_string(),
                resources: wanted.clone(),
            }));
        }
        if self.is_queued(op_id) {
            return Ok(AcquireOutcome::AlreadyQueued);
        }
        let entry = QueueEntry {
            op_id: op_id.to_string(),
            wanted: wanted.clone(),
            priority,
            call_token: call_token.to_string(),
            enqueued_ts: now_ms,
        };
        let at = self.queue.partition_point(|q| q.priority > priority);
        self.queue.insert(at, entry);
        Ok(AcquireOutcome::Enqueued)
    }

    /// Scans the queue in descending priority, granting every entry whose
    /// whole wanted set is free at its turn.
    fn grant_queued(&mut self, now_ms: u64) -> Vec<Grant> {
        let mut granted = Vec::new();
        let mut i = 0;
        while i < self.queue.len() {
            if self.all_free(self.queue[i].wanted.iter()) {
                let q = self.queue.remove(i);
                self.assign(&q.op_id, &q.wanted, now_ms);
                granted.push(Grant {
                    op_id: q.op_id,
                    call_token: q.call_token,
                    resources: q.wanted,
                });
            } else {
                i += 1;
            }
        }
        granted
    }

    pub fn release(&mut self, op_id: &str, call_token: &str, now_ms: u64) -> ReleaseOutcome {
        let freed: Vec<ResourceId> = self.owned_by(op_id).into_iter().collect();
        for r in &freed {
            self.owners.insert(r.clone(), Owner::Free);
        }
        self.held_since.remove(op_id);
        let granted = self.grant_queued(now_ms);
        ReleaseOutcome {
            released: call_token.to_string(),
            freed,
            granted,
        }
    }

    /// Moves every resource owned by `op_id` to the fault state. The queue is
    /// not re-evaluated: nothing became free.
    pub fn fault(&mut self, op_id: &str, call_token: &str) -> FaultOutcome {
        let faulted: Vec<ResourceId> = self.owned_by(op_id).into_iter().collect();
        for r in &faulted {
            self.owners.insert(r.clone(), Owner::Fault);
        }
        self.held_since.remove(op_id);
        let lockouts = faulted
            .iter()
            .filter_map(|r| self.lockouts.get(r).map(|plan| (r.clone(), plan.clone())))
            .collect();
        FaultOutcome {
            confirmed: call_token.to_string(),
            faulted,
            lockouts,
        }
    }

    pub fn clear_fault(&mut self, resource: &str, now_ms: u64) -> Result<Vec<Grant>, InterlockError> {
        match self.owners.get(resource) {
            None => Err(InterlockError::UnknownResource(resource.to_string())),
            Some(Owner::Fault) => {
                self.owners.insert(resource.to_string(), Owner::Free);
                Ok(self.grant_queued(now_ms))
            }
            Some(_) => Err(InterlockError::NotFaulted(resource.to_string())),
        }
    }

    /// Removes a queued request whose caller gave up before it was granted.
    pub fn withdraw(&mut self, op_id: &str) -> Option<QueueEntry> {
        let at = self.queue.iter().position(|q| q.op_id == op_id)?;
        Some(self.queue.remove(at))
    }

    /// Warns once per queue entry and once per holding that crosses its threshold.
    pub fn watchdog(&mut self, now_ms: u64) -> Vec<Warning> {
        let mut out = Vec::new();
        for q in &self.queue {
            let elapsed = now_ms.saturating_sub(q.enqueued_ts);
            if elapsed > self.thresholds.queue_warn_ms && self.warned.insert((WarningKind::QueuedTooLong, q.op_id.clone(), q.enqueued_ts)) {
                out.push(Warning {
                    kind: WarningKind::QueuedTooLong,
                    op_id: q.op_id.clone(),
                    since_ts: q.enqueued_ts,
                    elapsed_ms: elapsed,
                });
            }
        }
        for (op, since) in &self.held_since {
            let elapsed = now_ms.saturating_sub(*since);
            if elapsed > self.thresholds.hold_warn_ms && self.warned.insert((WarningKind::HeldTooLong, op.clone(), *since)) {
                out.push(Warning {
                    kind: WarningKind::HeldTooLong,
                    op_id: op.clone(),
                    since_ts: *since,
                    elapsed_ms: elapsed,
                });
            }
        }
        let live: BTreeSet<(OpId, u64)> = self
            .queue
            .iter()
            .map(|q| (q.op_id.clone(), q.enqueued_ts))
            .chain(self.held_since.iter().map(|(o, t)| (o.clone(), *t)))
            .collect();
        self.warned.retain(|(_, op, t)| live.contains(&(op.clone(), *t)));
        out
    }
}
