//! Singular operations: acquire resources, run a straight-line list of group
//! commands and condition waits, restore every touched actuator to idle and
//! release. Any step failure faults the operation at the interlock.
//!
//! Guarantees checked at run time:
//! - C1: at most one live run per operation.
//! - C2: every dispatch stays inside the granted resources.
//! - C3: a clean completion leaves every touched actuator commanded to idle.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::actuator::DispatchMode;
use crate::bus::wire::NOTIFY_TOPIC;
use crate::bus::{Envelope, Qos};
use crate::condition::{EvalContext, Expr};
use crate::group::GroupMember;
use crate::interlock::{AcquireOutcome, Grant, InterlockError};
use crate::metrics::{EventRecord, Layer};
use crate::plane::Plane;

pub const DEFAULT_GROUP_TIMEOUT_MS: u64 = 30_000;
pub const DEFAULT_POLL_MS: u64 = 1_000;

#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    Group {
        members: Vec<GroupMember>,
        timeout_ms: u64,
    },
    Condition {
        until: Expr,
        /// Process anomaly check; true faults the operation.
        fail_if: Option<Expr>,
        poll_ms: u64,
        timeout_ms: Option<u64>,
        /// The step never completes earlier than this after it starts.
        min_elapsed_ms: u64,
    },
}

impl Step {
    pub fn group(members: Vec<GroupMember>) -> Self {
        Step::Group {
            members,
            timeout_ms: DEFAULT_GROUP_TIMEOUT_MS,
        }
    }

    pub fn condition(until: Expr, timeout_ms: u64) -> Self {
        Step::Condition {
            until,
            fail_if: None,
            poll_ms: DEFAULT_POLL_MS,
            timeout_ms: Some(timeout_ms),
            min_elapsed_ms: 0,
        }
    }

    /// A wait that is always satisfied once `ms` have elapsed.
    pub fn delay(ms: u64) -> Self {
        Step::Condition {
            until: Expr::always(),
            fail_if: None,
            poll_ms: ms.max(1),
            timeout_ms: None,
            min_elapsed_ms: ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperationDef {
    pub op_id: String,
    pub resources: BTreeSet<String>,
    pub priority: i64,
    pub steps: Vec<Step>,
    pub idle_restore: Vec<GroupMember>,
    pub restore_timeout_ms: u64,
}

impl OperationDef {
    /// Every actuator any step or the restore group commands.
    pub fn actuators(&self) -> BTreeSet<&str> {
        self.steps
            .iter()
            .filter_map(|s| match s {
                Step::Group { members, .. } => Some(members),
                Step::Condition { .. } => None,
            })
            .flatten()
            .chain(&self.idle_restore)
            .map(|m| m.system_id.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "phase", content = "step")]
pub enum RunPhase {
    WaitingLock,
    Running(usize),
    Restoring,
    Releasing,
    Done,
    Faulted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperationRun {
    pub op_id: String,
    pub run_token: String,
    pub phase: RunPhase,
    pub requested_ts: u64,
    pub started_ts: Option<u64>,
    pub ended_ts: Option<u64>,
    pub cause: Option<String>,
    pub touched: BTreeSet<String>,
    pub granted: BTreeSet<String>,
    step_started_ts: u64,
    group: Option<String>,
    deadline: Option<u64>,
    next_poll: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunOutcome {
    Done,
    Faulted(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunFinished {
    pub op_id: String,
    pub run_token: String,
    pub outcome: RunOutcome,
    pub started_ts: Option<u64>,
    pub ended_ts: u64,
}

#[derive(Debug, Error, PartialEq)]
pub enum OperationError {
    #[error("unknown operation {0:?}")]
    UnknownOp(String),
    #[error("C1: operation {0:?} already has a live run")]
    AlreadyRunning(String),
    #[error(transparent)]
    Interlock(#[from] InterlockError),
}

struct StepCtx<'a> {
    plane: &'a Plane,
    elapsed_ms: u64,
}

impl EvalContext for StepCtx<'_> {
    fn sensor(&self, id: &str) -> Option<f64> {
        self.plane.sensors.get(id).map(|r| r.value)
    }

    fn elapsed_in_state_ms(&self) -> Option<u64> {
        Some(self.elapsed_ms)
    }

    fn external(&self, name: &str) -> bool {
        self.plane.externals.contains(name)
    }
}

enum Check {
    Satisfied,
    Waiting,
    Failed(String),
}

#[derive(Default)]
pub struct OperationEngine {
    defs: BTreeMap<String, OperationDef>,
    live: BTreeMap<String, OperationRun>,
    /// Group token to the op whose step is waiting on it.
    groups: BTreeMap<String, String>,
    finished: Vec<RunFinished>,
}

impl OperationEngine {
    pub fn new(defs: impl IntoIterator<Item = OperationDef>) -> Self {
        Self {
            defs: defs.into_iter().map(|d| (d.op_id.clone(), d)).collect(),
            ..Default::default()
        }
    }

    pub fn def(&self, op_id: &str) -> Option<&OperationDef> {
        self.defs.get(op_id)
    }

    pub fn defs(&self) -> impl Iterator<Item = &OperationDef> {
        self.defs.values()
    }

    pub fn live(&self, op_id: &str) -> Option<&OperationRun> {
        self.live.get(op_id)
    }

    pub fn live_runs(&self) -> impl Iterator<Item = &OperationRun> {
        self.live.values()
    }

    pub fn take_finished(&mut self) -> Vec<RunFinished> {
        std::mem::take(&mut self.finished)
    }

    pub fn next_due(&self) -> Option<u64> {
        self.live.values().flat_map(|r| [r.deadline, r.next_poll]).flatten().min()
    }

    /// Starts a run. The run waits in the interlock queue if its resources are busy.
    pub fn run(&mut self, op_id: &str, plane: &mut Plane, now: u64) -> Result<String, OperationError> {
        let def = self.defs.get(op_id).ok_or_else(|| OperationError::UnknownOp(op_id.to_string()))?;
        if let Some(run) = self.live.get(op_id) {
            plane.log(EventRecord::new(now, Layer::Operation, "rejected", op_id).token(&run.run_token).attr("cause", "C1"));
            return Err(OperationError::AlreadyRunning(op_id.to_string()));
        }
        let wanted = def.resources.clone();
        let token = plane.tokens.next("run");
        let outcome = plane.interlock.acquire(op_id, &wanted, &token, now)?;
        self.live.insert(
            op_id.to_string(),
            OperationRun {
                op_id: op_id.to_string(),
                run_token: token.clone(),
                phase: RunPhase::WaitingLock,
                requested_ts: now,
                started_ts: None,
                ended_ts: None,
                cause: None,
                touched: BTreeSet::new(),
                granted: BTreeSet::new(),
                step_started_ts: now,
                group: None,
                deadline: None,
                next_poll: None,
            },
        );
        plane.log(EventRecord::new(now, Layer::Operation, "start", op_id).token(&token));
        plane.log(
            EventRecord::new(now, Layer::Interlock, "acquire", op_id)
                .token(&token)
                .attr("resources", wanted.iter().cloned().collect::<Vec<_>>()),
        );
        match outcome {
            AcquireOutcome::Granted(g) => self.on_grant(g, plane, now),
            AcquireOutcome::Enqueued => {
                plane.log(EventRecord::new(now, Layer::Interlock, "enqueued", op_id).token(&token));
            }
            AcquireOutcome::AlreadyQueued => {
                // a queued request from no live run cannot exist; keep the older one
                tracing::warn!(op_id, "duplicate acquire swallowed");
            }
        }
        Ok(token)
    }

    pub fn on_grants(&mut self, grants: Vec<Grant>, plane: &mut Plane, now: u64) {
        for g in grants {
            self.on_grant(g, plane, now);
        }
    }

    fn on_grant(&mut self, grant: Grant, plane: &mut Plane, now: u64) {
        plane.log(
            EventRecord::new(now, Layer::Interlock, "grant", &grant.op_id)
                .token(&grant.call_token)
                .attr("resources", grant.resources.iter().cloned().collect::<Vec<_>>()),
        );
        let Some(run) = self.live.get_mut(&grant.op_id).filter(|r| r.run_token == grant.call_token && r.phase == RunPhase::WaitingLock) else {
            tracing::warn!(op_id = %grant.op_id, "grant for no waiting run; releasing");
            let out = plane.interlock.release(&grant.op_id, &grant.call_token, now);
            plane.log(EventRecord::new(now, Layer::Interlock, "release", &grant.op_id).token(&grant.call_token));
            self.on_grants(out.granted, plane, now);
            return;
        };
        run.started_ts = Some(now);
        run.granted = grant.resources;
        run.phase = RunPhase::Running(0);
        plane.log(EventRecord::new(now, Layer::Operation, "granted", &grant.op_id).token(&grant.call_token));
        self.advance(&grant.op_id, plane, now);
    }

    /// Runs steps until one has to wait.
    fn advance(&mut self, op_id: &str, plane: &mut Plane, now: u64) {
        loop {
            let Some(run) = self.live.get_mut(op_id) else { return };
            let def = &self.defs[op_id];
            run.deadline = None;
            run.next_poll = None;
            run.step_started_ts = now;
            match run.phase {
                RunPhase::Running(i) if i < def.steps.len() => {
                    let token = run.run_token.clone();
                    plane.log(EventRecord::new(now, Layer::Operation, "step", op_id).token(&token).attr("index", i));
                    match &def.steps[i] {
                        Step::Group { members, timeout_ms } => {
                            let timeout = *timeout_ms;
                            let members = members.clone();
                            if let Err(cause) = self.start_group(op_id, &members, timeout, plane, now) {
                                self.fail(op_id, &cause, plane, now);
                            }
                            return;
                        }
                        Step::Condition { .. } => match self.check(op_id, plane, now) {
                            Check::Satisfied => self.live.get_mut(op_id).expect("live").phase = RunPhase::Running(i + 1),
                            Check::Failed(cause) => {
                                self.fail(op_id, &cause, plane, now);
                                return;
                            }
                            Check::Waiting => return,
                        },
                    }
                }
                RunPhase::Running(_) => {
                    run.phase = RunPhase::Restoring;
                    let restore = def.idle_restore.clone();
                    let timeout = def.restore_timeout_ms;
                    if restore.is_empty() {
                        run.phase = RunPhase::Releasing;
                        continue;
                    }
                    if let Err(cause) = self.start_group(op_id, &restore, timeout, plane, now) {
                        self.fail(op_id, &cause, plane, now);
                    }
                    return;
                }
                RunPhase::Releasing => {
                    self.finish(op_id, plane, now);
                    return;
                }
                RunPhase::WaitingLock | RunPhase::Restoring | RunPhase::Done | RunPhase::Faulted => return,
            }
        }
    }

    fn start_group(&mut self, op_id: &str, members: &[GroupMember], timeout_ms: u64, plane: &mut Plane, now: u64) -> Result<(), String> {
        let run = self.live.get_mut(op_id).expect("live");
        let allowed = plane.actuators_of(&run.granted);
        if let Some(m) = members.iter().find(|m| !allowed.contains(&m.system_id)) {
            plane.log(
                EventRecord::new(now, Layer::Operation, "c2_violation", op_id)
                    .token(&run.run_token)
                    .attr("actuator", m.system_id.clone()),
            );
            return Err(format!("C2: {} outside granted resources", m.system_id));
        }
        let token = plane.tokens.next("grp");
        plane.issue_group(&token, members, DispatchMode::Normal, now).map_err(|e| e.to_string())?;
        run.touched.extend(members.iter().map(|m| m.system_id.clone()));
        run.group = Some(token.clone());
        run.deadline = Some(now + timeout_ms);
        self.groups.insert(token, op_id.to_string());
        Ok(())
    }

    fn check(&mut self, op_id: &str, plane: &Plane, now: u64) -> Check {
        let run = self.live.get_mut(op_id).expect("live");
        let RunPhase::Running(i) = run.phase else { return Check::Waiting };
        let Step::Condition {
            until,
            fail_if,
            poll_ms,
            timeout_ms,
            min_elapsed_ms,
        } = &self.defs[op_id].steps[i]
        else {
            return Check::Waiting;
        };
        let elapsed = now.saturating_sub(run.step_started_ts);
        let ctx = StepCtx { plane, elapsed_ms: elapsed };
        if let Some(anomaly) = fail_if {
            match anomaly.evaluate(&ctx) {
                Ok(true) => return Check::Failed(format!("anomaly: {anomaly}")),
                Ok(false) => {}
                Err(e) => return Check::Failed(format!("configuration: {e}")),
            }
        }
        if elapsed >= *min_elapsed_ms {
            match until.evaluate(&ctx) {
                Ok(true) => return Check::Satisfied,
                Ok(false) => {}
                Err(e) => return Check::Failed(format!("configuration: {e}")),
            }
        }
        if timeout_ms.is_some_and(|t| elapsed >= t) {
            return Check::Failed(format!("condition timeout: {until}"));
        }
        let next = if elapsed < *min_elapsed_ms {
            run.step_started_ts + min_elapsed_ms
        } else {
            now + poll_ms
        };
        run.next_poll = Some(next);
        run.deadline = timeout_ms.map(|t| run.step_started_ts + t);
        Check::Waiting
    }

    pub fn on_group_complete(&mut self, group_token: &str, plane: &mut Plane, now: u64) {
        let Some(op_id) = self.groups.remove(group_token) else { return };
        let Some(run) = self.live.get_mut(&op_id) else { return };
        if run.group.as_deref() != Some(group_token) {
            return;
        }
        run.group = None;
        run.phase = match run.phase {
            RunPhase::Running(i) => RunPhase::Running(i + 1),
            RunPhase::Restoring => RunPhase::Releasing,
            other => other,
        };
        self.advance(&op_id, plane, now);
    }

    /// Handles due condition polls and step timeouts.
    pub fn poll(&mut self, plane: &mut Plane, now: u64) {
        let due: Vec<String> = self
            .live
            .values()
            .filter(|r| r.deadline.is_some_and(|t| t <= now) || r.next_poll.is_some_and(|t| t <= now))
            .map(|r| r.op_id.clone())
            .collect();
        for op_id in due {
            let Some(run) = self.live.get(&op_id) else { continue };
            if let Some(group) = run.group.clone() {
                if run.deadline.is_some_and(|t| t <= now) {
                    let cause = format!("group timeout: {group}");
                    self.fail(&op_id, &cause, plane, now);
                }
                continue;
            }
            let RunPhase::Running(i) = run.phase else { continue };
            match self.check(&op_id, plane, now) {
                Check::Satisfied => {
                    self.live.get_mut(&op_id).expect("live").phase = RunPhase::Running(i + 1);
                    self.advance(&op_id, plane, now);
                }
                Check::Failed(cause) => self.fail(&op_id, &cause, plane, now),
                Check::Waiting => {}
            }
        }
    }

    fn finish(&mut self, op_id: &str, plane: &mut Plane, now: u64) {
        let run = self.live.get(op_id).expect("live");
        let token = run.run_token.clone();
        let off_idle: Vec<String> = run
            .touched
            .iter()
            .filter(|id| {
                let b = plane.actuators.binding(id);
                let r = plane.actuators.record(id);
                match (b, r) {
                    (Some(b), Some(r)) => (r.target - b.idle_value).abs() > b.tolerance,
                    _ => true,
                }
            })
            .cloned()
            .collect();
        plane.log(
            EventRecord::new(now, Layer::Operation, "c3_checked", op_id)
                .token(&token)
                .attr("touched", run.touched.len())
                .attr("ok", off_idle.is_empty()),
        );
        if !off_idle.is_empty() {
            let cause = format!("C3: not idle at release: {}", off_idle.join(","));
            self.fail(op_id, &cause, plane, now);
            return;
        }
        let run = self.live.remove(op_id).expect("live");
        let out = plane.interlock.release(op_id, &token, now);
        plane.log(
            EventRecord::new(now, Layer::Interlock, "release", op_id)
                .token(&token)
                .attr("freed", out.freed.clone()),
        );
        plane.log(
            EventRecord::new(now, Layer::Operation, "done", op_id)
                .token(&token)
                .attr("runtime_ms", now - run.started_ts.unwrap_or(now)),
        );
        self.finished.push(RunFinished {
            op_id: op_id.to_string(),
            run_token: token,
            outcome: RunOutcome::Done,
            started_ts: run.started_ts,
            ended_ts: now,
        });
        self.on_grants(out.granted, plane, now);
    }

    /// Faults an operation at the interlock: its resources are locked, their
    /// lockout groups dispatched and any live run ends as faulted. Also the
    /// entry point for manually triggered faults.
    pub fn fault(&mut self, op_id: &str, cause: &str, plane: &mut Plane, now: u64) -> Result<(), OperationError> {
        if !self.defs.contains_key(op_id) {
            return Err(OperationError::UnknownOp(op_id.to_string()));
        }
        self.fail(op_id, cause, plane, now);
        Ok(())
    }

    fn fail(&mut self, op_id: &str, cause: &str, plane: &mut Plane, now: u64) {
        let run = self.live.remove(op_id);
        let token = run.as_ref().map(|r| r.run_token.clone()).unwrap_or_default();
        if let Some(group) = run.as_ref().and_then(|r| r.group.as_ref()) {
            self.groups.remove(group);
            plane.groups.abandon(group);
        }
        if run.as_ref().is_some_and(|r| r.phase == RunPhase::WaitingLock) {
            plane.interlock.withdraw(op_id);
        }
        let outcome = plane.interlock.fault(op_id, &token);
        for r in &outcome.faulted {
            for a in plane.actuators_of([r]) {
                plane.actuators.lock(&a);
            }
        }
        let mut lockout_tokens = Vec::new();
        for (resource, plan) in &outcome.lockouts {
            if plan.is_empty() {
                continue;
            }
            let lk = plane.tokens.next("lk");
            match plane.issue_group(&lk, plan, DispatchMode::Lockout, now) {
                Ok(()) => lockout_tokens.push(lk),
                Err(e) => tracing::error!(resource = %resource, error = %e, "lockout dispatch failed"),
            }
        }
        plane.log(
            EventRecord::new(now, Layer::Interlock, "fault", op_id)
                .token(&token)
                .attr("resources", outcome.faulted.clone())
                .attr("lockout_tokens", lockout_tokens.clone())
                .attr("cause", cause),
        );
        let notice = serde_json::json!({
            "op_id": op_id,
            "token": token,
            "cause": cause,
            "resources": outcome.faulted,
            "ts": now,
        });
        plane.publish(Envelope::new(NOTIFY_TOPIC, notice.to_string(), Qos::AtLeastOnce, now));
        tracing::warn!(op_id, cause, "operation faulted");
        if let Some(run) = run {
            plane.log(EventRecord::new(now, Layer::Operation, "faulted", op_id).token(&token).attr("cause", cause));
            self.finished.push(RunFinished {
                op_id: op_id.to_string(),
                run_token: token,
                outcome: RunOutcome::Faulted(cause.to_string()),
                started_ts: run.started_ts,
                ended_ts: now,
            });
        }
    }

    /// Returns a faulted resource to service and starts any runs it unblocks.
    pub fn clear(&mut self, resource: &str, plane: &mut Plane, now: u64) -> Result<(), OperationError> {
        let grants = plane.interlock.clear_fault(resource, now)?;
        for a in plane.actuators_of([&resource.to_string()]) {
            plane.actuators.unlock(&a);
        }
        plane.log(EventRecord::new(now, Layer::Interlock, "clear", resource));
        self.on_grants(grants, plane, now);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actuator::{ActuatorBinding, ActuatorKind, ActuatorLayer, Phase};
    use crate::interlock::{Interlock, Owner};

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

    fn plane() -> Plane {
        let actuators = ActuatorLayer::new([valve("V1", 1), valve("V2", 2), valve("V3", 3)]).unwrap();
        let mut il = Interlock::new(["red".to_string(), "blue".to_string()]);
        il.register("fill", 10).unwrap();
        il.register("drain", 5).unwrap();
        il.set_lockout("red", vec![GroupMember::new("V1", 0.0)]).unwrap();
        let res = BTreeMap::from([
            ("red".to_string(), BTreeSet::from(["V1".to_string(), "V3".to_string()])),
            ("blue".to_string(), BTreeSet::from(["V2".to_string()])),
        ]);
        let mut p = Plane::new(actuators, il, res);
        for id in ["V1", "V2", "V3"] {
            let io = id[1..].parse().unwrap();
            p.actuators.ingest_feedback("ctrl-1", io, 0.0, 0);
        }
        p
    }

    fn fill() -> OperationDef {
        OperationDef {
            op_id: "fill".into(),
            resources: BTreeSet::from(["red".to_string()]),
            priority: 10,
            steps: vec![
                Step::group(vec![GroupMember::new("V1", 100.0)]),
                Step::condition(Expr::parse("level > 50").unwrap(), 60_000),
            ],
            idle_restore: vec![GroupMember::new("V1", 0.0)],
            restore_timeout_ms: DEFAULT_GROUP_TIMEOUT_MS,
        }
    }

    fn feed(p: &mut Plane, e: &mut OperationEngine, io: u32, value: f64, now: u64) {
        for c in p.ingest_state("ctrl-1", io, value, now) {
            e.on_group_complete(&c.group_token, p, now);
        }
    }

    #[test]
    fn clean_run_restores_and_releases() {
        let mut p = plane();
        let mut e = OperationEngine::new([fill()]);
        p.sensors.update("level", 80.0, 0);
        e.run("fill", &mut p, 0).unwrap();
        assert_eq!(p.interlock.owner("red"), Some(&Owner::Op("fill".into())));
        feed(&mut p, &mut e, 1, 50.0, 2_000);
        feed(&mut p, &mut e, 1, 100.0, 4_000);
        // condition already true, so the restore group went out immediately
        assert_eq!(e.live("fill").unwrap().phase, RunPhase::Restoring);
        feed(&mut p, &mut e, 1, 0.0, 8_000);
        assert!(e.live("fill").is_none());
        assert_eq!(p.interlock.owner("red"), Some(&Owner::Free));
        let done = e.take_finished();
        assert_eq!(done[0].outcome, RunOutcome::Done);
        assert_eq!(done[0].ended_ts - done[0].started_ts.unwrap(), 8_000);
    }

    #[test]
    fn second_run_is_rejected() {
        let mut p = plane();
        let mut e = OperationEngine::new([fill()]);
        e.run("fill", &mut p, 0).unwrap();
        assert_eq!(e.run("fill", &mut p, 1), Err(OperationError::AlreadyRunning("fill".into())));
    }

    #[test]
    fn group_timeout_faults_and_locks_out() {
        let mut p = plane();
        let mut e = OperationEngine::new([fill()]);
        e.run("fill", &mut p, 0).unwrap();
        e.poll(&mut p, DEFAULT_GROUP_TIMEOUT_MS);
        assert_eq!(p.interlock.owner("red"), Some(&Owner::Fault));
        assert!(p.actuators.is_fault_locked("V1"));
        assert!(matches!(e.take_finished()[0].outcome, RunOutcome::Faulted(_)));
        let rec = p.actuators.record("V1").unwrap();
        assert_eq!(rec.target, 0.0);
        assert_eq!(rec.phase, Phase::Pending);
        // re-acquisition blocks until clear
        e.run("fill", &mut p, 31_000).unwrap();
        assert_eq!(e.live("fill").unwrap().phase, RunPhase::WaitingLock);
        e.clear("red", &mut p, 40_000).unwrap();
        assert_eq!(e.live("fill").unwrap().phase, RunPhase::Running(0));
    }

    #[test]
    fn condition_timeout_faults() {
        let mut p = plane();
        let mut e = OperationEngine::new([fill()]);
        p.sensors.update("level", 10.0, 0);
        e.run("fill", &mut p, 0).unwrap();
        feed(&mut p, &mut e, 1, 100.0, 5_000);
        e.poll(&mut p, 6_000);
        assert!(e.live("fill").is_some());
        e.poll(&mut p, 65_000);
        let f = e.take_finished();
        assert!(matches!(&f[0].outcome, RunOutcome::Faulted(c) if c.starts_with("condition timeout")));
    }

    #[test]
    fn anomaly_faults_immediately() {
        let mut p = plane();
        let mut def = fill();
        def.steps[1] = Step::Condition {
            until: Expr::parse("level > 50").unwrap(),
            fail_if: Some(Expr::parse("flow <= 0").unwrap()),
            poll_ms: 1_000,
            timeout_ms: Some(60_000),
            min_elapsed_ms: 0,
        };
        let mut e = OperationEngine::new([def]);
        p.sensors.update("level", 10.0, 0);
        p.sensors.update("flow", 0.0, 0);
        e.run("fill", &mut p, 0).unwrap();
        feed(&mut p, &mut e, 1, 100.0, 5_000);
        assert!(matches!(&e.take_finished()[0].outcome, RunOutcome::Faulted(c) if c.starts_with("anomaly")));
    }

    #[test]
    fn runtime_c2_check_faults_outside_dispatch() {
        let mut p = plane();
        let mut def = fill();
        def.steps[0] = Step::group(vec![GroupMember::new("V2", 100.0)]);
        let mut e = OperationEngine::new([def]);
        e.run("fill", &mut p, 0).unwrap();
        assert!(p.take_outbox().iter().all(|env| !env.topic.contains("/io/2/")));
        assert!(matches!(&e.take_finished()[0].outcome, RunOutcome::Faulted(c) if c.starts_with("C2")));
    }

    #[test]
    fn missing_restore_fails_c3() {
        let mut p = plane();
        let mut def = fill();
        def.idle_restore.clear();
        def.steps.truncate(1);
        let mut e = OperationEngine::new([def]);
        e.run("fill", &mut p, 0).unwrap();
        feed(&mut p, &mut e, 1, 100.0, 5_000);
        assert!(matches!(&e.take_finished()[0].outcome, RunOutcome::Faulted(c) if c.starts_with("C3")));
    }

    #[test]
    fn delay_waits_its_duration() {
        let mut p = plane();
        let mut def = fill();
        def.steps = vec![Step::delay(5_000)];
        def.idle_restore.clear();
        let mut e = OperationEngine::new([def]);
        e.run("fill", &mut p, 0).unwrap();
        assert_eq!(e.next_due(), Some(5_000));
        e.poll(&mut p, 4_999);
        assert!(e.live("fill").is_some());
        e.poll(&mut p, 5_000);
        assert_eq!(e.take_finished()[0].outcome, RunOutcome::Done);
    }

    #[test]
    fn release_grants_queued_run() {
        let mut p = plane();
        let drain = OperationDef {
            op_id: "drain".into(),
            resources: BTreeSet::from(["red".to_string()]),
            priority: 5,
            steps: vec![Step::delay(1_000)],
            idle_restore: vec![],
            restore_timeout_ms: DEFAULT_GROUP_TIMEOUT_MS,
        };
        let mut def = fill();
        def.steps = vec![Step::delay(2_000)];
        def.idle_restore.clear();
        let mut e = OperationEngine::new([def, drain]);
        e.run("fill", &mut p, 0).unwrap();
        e.run("drain", &mut p, 10).unwrap();
        assert_eq!(e.live("drain").unwrap().phase, RunPhase::WaitingLock);
        e.poll(&mut p, 2_000);
        assert_eq!(e.live("drain").unwrap().started_ts, Some(2_000));
    }
}
