//! Automation routines: state machines that periodically evaluate the
//! triggers leaving their current state and dispatch at most one owned
//! operation at a time.

use std::collections::{BTreeMap, BTreeSet};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::condition::{EvalContext, Expr, Term};
use crate::metrics::{EventRecord, Layer};
use crate::operation::{OperationEngine, RunFinished, RunOutcome};
use crate::plane::Plane;

pub const DEFAULT_EVAL_PERIOD_MS: u64 = 1_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum FaultPolicy {
    /// Deactivate on an owned operation fault; needs manual reactivation.
    #[default]
    Halt,
    /// Stay in the current state and keep evaluating.
    Hold,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub from: String,
    pub trigger: Expr,
    pub op: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutineDef {
    pub routine_id: String,
    pub states: BTreeSet<String>,
    pub initial: String,
    pub owned_ops: BTreeSet<String>,
    /// Evaluated in declaration order.
    pub transitions: Vec<Transition>,
    pub eval_period_ms: u64,
    pub fault_policy: FaultPolicy,
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingOp {
    pub op_id: String,
    pub run_token: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutineRun {
    pub routine_id: String,
    pub current: String,
    pub pending: Option<PendingOp>,
    pub active: bool,
    pub entered_ts: u64,
    next_tick: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RoutineError {
    #[error("unknown routine {0:?}")]
    Unknown(String),
}

struct TriggerCtx<'a> {
    plane: &'a Plane,
    in_state_ms: u64,
}

impl EvalContext for TriggerCtx<'_> {
    fn sensor(&self, id: &str) -> Option<f64> {
        self.plane.sensors.get(id).map(|r| r.value)
    }

    fn elapsed_in_state_ms(&self) -> Option<u64> {
        Some(self.in_state_ms)
    }

    fn external(&self, name: &str) -> bool {
        self.plane.externals.contains(name)
    }
}

#[derive(Default)]
pub struct RoutineEngine {
    defs: BTreeMap<String, RoutineDef>,
    runs: BTreeMap<String, RoutineRun>,
}

impl RoutineEngine {
    pub fn new(defs: impl IntoIterator<Item = RoutineDef>, now: u64) -> Self {
        let mut engine = Self::default();
        for d in defs {
            engine.runs.insert(
                d.routine_id.clone(),
                RoutineRun {
                    routine_id: d.routine_id.clone(),
                    current: d.initial.clone(),
                    pending: None,
                    active: d.active,
                    entered_ts: now,
                    next_tick: now,
                },
            );
            engine.defs.insert(d.routine_id.clone(), d);
        }
        engine
    }

    pub fn run(&self, routine_id: &str) -> Option<&RoutineRun> {
        self.runs.get(routine_id)
    }

    pub fn runs(&self) -> impl Iterator<Item = &RoutineRun> {
        self.runs.values()
    }

    pub fn def(&self, routine_id: &str) -> Option<&RoutineDef> {
        self.defs.get(routine_id)
    }

    pub fn next_due(&self) -> Option<u64> {
        self.runs.values().filter(|r| r.active).map(|r| r.next_tick).min()
    }

    /// Ticks every active routine whose evaluation period has elapsed.
    pub fn tick_due(&mut self, ops: &mut OperationEngine, plane: &mut Plane, now: u64) {
        let due: Vec<String> = self
            .runs
            .values()
            .filter(|r| r.active && r.next_tick <= now)
            .map(|r| r.routine_id.clone())
            .collect();
        for id in due {
            let period = self.defs[&id].eval_period_ms.max(1);
            let run = self.runs.get_mut(&id).expect("known");
            while run.next_tick <= now {
                run.next_tick += period;
            }
            self.tick(&id, ops, plane, now);
        }
    }

    /// Evaluates the transitions out of the current state and dispatches the
    /// first satisfied one. Returns the run token of the dispatched operation.
    pub fn tick(&mut self, routine_id: &str, ops: &mut OperationEngine, plane: &mut Plane, now: u64) -> Option<String> {
        let def = self.defs.get(routine_id)?;
        let run = self.runs.get_mut(routine_id)?;
        if !run.active || run.pending.is_some() {
            return None;
        }
        let ctx = TriggerCtx {
            plane,
            in_state_ms: now.saturating_sub(run.entered_ts),
        };
        let mut chosen = None;
        for t in def.transitions.iter().filter(|t| t.from == run.current) {
            match t.trigger.evaluate(&ctx) {
                Ok(true) => {
                    chosen = Some(t.clone());
                    break;
                }
                Ok(false) => {}
                Err(e) => {
                    tracing::debug!(routine = routine_id, error = %e, "trigger not evaluable yet");
                }
            }
        }
        let t = chosen?;
        // external triggers are one-shot latches consumed by the transition they fire
        for term in t.trigger.terms() {
            if let Term::External(name) = term {
                plane.externals.remove(name);
            }
        }
        match ops.run(&t.op, plane, now) {
            Ok(token) => {
                plane.log(
                    EventRecord::new(now, Layer::Routine, "dispatch", routine_id)
                        .token(&token)
                        .attr("op", t.op.clone())
                        .attr("from", t.from.clone())
                        .attr("to", t.to.clone()),
                );
                // the run may already be finished if it had nothing to wait for
                run.pending = Some(PendingOp {
                    op_id: t.op,
                    run_token: token.clone(),
                    to: t.to,
                });
                Some(token)
            }
            Err(e) => {
                tracing::error!(routine = routine_id, op = %t.op, error = %e, "routine dispatch rejected");
                plane.log(
                    EventRecord::new(now, Layer::Routine, "dispatch_rejected", routine_id)
                        .attr("op", t.op)
                        .attr("error", e.to_string()),
                );
                None
            }
        }
    }

    /// Applies an operation result to the routine waiting on it.
    pub fn on_finished(&mut self, fin: &RunFinished, plane: &mut Plane, now: u64) {
        let Some((id, def)) = self.defs.iter().find(|(_, d)| d.owned_ops.contains(&fin.op_id)) else {
            return;
        };
        let run = self.runs.get_mut(id).expect("run per def");
        let Some(pending) = run.pending.take_if(|p| p.run_token == fin.run_token) else {
            return;
        };
        match &fin.outcome {
            RunOutcome::Done => {
                plane.log(
                    EventRecord::new(now, Layer::Routine, "transition", id)
                        .token(&fin.run_token)
                        .attr("from", run.current.clone())
                        .attr("to", pending.to.clone()),
                );
                run.current = pending.to;
                run.entered_ts = now;
            }
            RunOutcome::Faulted(cause) => {
                let halt = def.fault_policy == FaultPolicy::Halt;
                if halt {
                    run.active = false;
                }
                plane.log(
                    EventRecord::new(now, Layer::Routine, if halt { "halt" } else { "hold" }, id)
                        .token(&fin.run_token)
                        .attr("cause", cause.clone()),
                );
            }
        }
    }

    /// Deactivation stops new dispatches; a pending operation still runs to its end.
    pub fn set_active(&mut self, routine_id: &str, active: bool, plane: &mut Plane, now: u64) -> Result<(), RoutineError> {
        let run = self.runs.get_mut(routine_id).ok_or_else(|| RoutineError::Unknown(routine_id.to_string()))?;
        if run.active != active {
            run.active = active;
            if active {
                run.next_tick = now;
            }
            plane.log(EventRecord::new(now, Layer::Routine, if active { "activate" } else { "deactivate" }, routine_id));
        }
        Ok(())
    }
}
