//! Wiring: the server-side [`Controller`] on a transport, and [`World`],
//! which drives controller, simulator and loopback bus from one simulated
//! clock.

use std::collections::VecDeque;
use std::sync::Arc;

use thiserror::Error;

use crate::bus::wire::{self, classify, control_topic, StatePayload, TelemetryPayload, TopicKind, CONTROL_PREFIX};
use crate::bus::{BusError, Envelope, Inbox, LoopbackBus, Qos, Transport};
use crate::clock::{Clock, SimClock};
use crate::config::{ConfigError, PlantConfig, Resolved, TimingConfig};
use crate::metrics::{EventLog, EventRecord, Layer, LogError};
use crate::operation::{OperationEngine, OperationError, RunFinished};
use crate::plane::Plane;
use crate::routine::{RoutineEngine, RoutineError};
use crate::scenario::{Action, Scenario, ScenarioEvent};
use crate::sim::{ChannelFault, PlantSim, SimError};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("unknown control verb {0:?}")]
    UnknownVerb(String),
    #[error(transparent)]
    Operation(#[from] OperationError),
    #[error(transparent)]
    Routine(#[from] RoutineError),
}

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("bus: {0}")]
    Bus(#[from] BusError),
    #[error("simulator: {0}")]
    Sim(#[from] SimError),
    #[error("event log: {0}")]
    Log(#[from] LogError),
    #[error("simulator disabled; cannot apply {0}")]
    NoSim(String),
}

const SUBSCRIPTIONS: [&str; 4] = ["dev/+/io/+/state", "dev/+/status", "dev/+/telemetry", "sys/ctl/#"];

/// Server side: every engine layer behind one inbox on the transport.
pub struct Controller {
    pub plane: Plane,
    pub ops: OperationEngine,
    pub routines: RoutineEngine,
    transport: Box<dyn Transport>,
    inbox: Inbox,
    log: EventLog,
    timing: TimingConfig,
    next_fault_scan: u64,
    next_watchdog: u64,
    link_requests: Vec<(String, bool)>,
    history: Vec<RunFinished>,
    now: u64,
}

impl Controller {
    pub fn new(resolved: Resolved, timing: TimingConfig, mut transport: Box<dyn Transport>, log: EventLog, now: u64) -> Result<Self, BusError> {
        let inbox = Inbox::new();
        for pattern in SUBSCRIPTIONS {
            transport.subscribe(pattern, inbox.handler())?;
        }
        let mut plane = Plane::new(resolved.actuators, resolved.interlock, resolved.resource_actuators);
        plane.sensor_channels = resolved.sensor_channels;
        Ok(Self {
            plane,
            ops: OperationEngine::new(resolved.operations),
            routines: RoutineEngine::new(resolved.routines, now),
            transport,
            inbox,
            log,
            next_fault_scan: now + timing.fault_scan_ms,
            next_watchdog: now + timing.watchdog_ms,
            timing,
            link_requests: Vec::new(),
            history: Vec::new(),
            now,
        })
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn log_mut(&mut self) -> &mut EventLog {
        &mut self.log
    }

    /// Every operation run that has ended, in completion order.
    pub fn history(&self) -> &[RunFinished] {
        &self.history
    }

    pub fn record(&mut self, rec: EventRecord) {
        if let Err(e) = self.log.record(rec) {
            tracing::warn!(error = %e, "event dropped");
        }
    }

    pub fn next_due(&self) -> Option<u64> {
        [Some(self.next_fault_scan), Some(self.next_watchdog), self.ops.next_due(), self.routines.next_due()]
            .into_iter()
            .flatten()
            .min()
    }

    pub fn has_pending_input(&self) -> bool {
        !self.inbox.is_empty()
    }

    pub fn take_link_requests(&mut self) -> Vec<(String, bool)> {
        std::mem::take(&mut self.link_requests)
    }

    /// Processes received envelopes, then timers, then routine ticks.
    pub fn step(&mut self, now: u64) {
        self.now = now;
        for env in self.inbox.drain() {
            self.on_envelope(&env, now);
        }
        if now >= self.next_fault_scan {
            self.plane.scan_faults(now);
            while self.next_fault_scan <= now {
                self.next_fault_scan += self.timing.fault_scan_ms;
            }
        }
        if now >= self.next_watchdog {
            for w in self.plane.interlock.watchdog(now) {
                tracing::warn!(op_id = %w.op_id, kind = ?w.kind, elapsed_ms = w.elapsed_ms, "interlock watchdog");
                let kind = match w.kind {
                    crate::interlock::WarningKind::QueuedTooLong => "queued_too_long",
                    crate::interlock::WarningKind::HeldTooLong => "held_too_long",
                };
                self.plane.log(
                    EventRecord::new(now, Layer::Interlock, "warning", &w.op_id)
                        .attr("warning", kind)
                        .attr("elapsed_ms", w.elapsed_ms),
                );
            }
            while self.next_watchdog <= now {
                self.next_watchdog += self.timing.watchdog_ms;
            }
        }
        self.ops.poll(&mut self.plane, now);
        self.settle(now);
        self.routines.tick_due(&mut self.ops, &mut self.plane, now);
        self.settle(now);
        self.flush();
    }

    fn settle(&mut self, now: u64) {
        loop {
            let done = self.ops.take_finished();
            if done.is_empty() {
                break;
            }
            for f in done {
                self.routines.on_finished(&f, &mut self.plane, now);
                self.history.push(f);
            }
        }
    }

    fn flush(&mut self) {
        for env in self.plane.take_outbox() {
            let topic = env.topic.clone();
            if let Err(e) = self.transport.publish(env) {
                // surfaces later as a stalled command in the fault scan
                tracing::warn!(topic, error = %e, "publish failed");
                self.plane.log(EventRecord::new(self.now, Layer::Bus, "publish_failed", &topic).attr("error", e.to_string()));
            }
        }
        for rec in self.plane.take_events() {
            self.record(rec);
        }
    }

    fn on_envelope(&mut self, env: &Envelope, now: u64) {
        let recv = env.recv_ts.unwrap_or(now);
        match classify(&env.topic) {
            TopicKind::State { device, io } => {
                let Ok(p) = wire::decode::<StatePayload>(&env.topic, &env.payload) else {
                    self.plane.log(EventRecord::new(recv, Layer::Bus, "malformed", &env.topic));
                    return;
                };
                self.plane.log(
                    EventRecord::new(recv, Layer::Bus, "state_rx", device)
                        .attr("io", io)
                        .attr("value", p.value)
                        .attr("src_ts", p.ts),
                );
                for c in self.plane.ingest_state(device, io, p.value, recv) {
                    self.ops.on_group_complete(&c.group_token, &mut self.plane, recv);
                }
            }
            TopicKind::Status { device } => {
                let status = String::from_utf8_lossy(&env.payload).into_owned();
                self.plane.log(EventRecord::new(recv, Layer::Bus, "status", device).attr("status", status));
            }
            TopicKind::Telemetry { device } => match wire::decode::<TelemetryPayload>(&env.topic, &env.payload) {
                Ok(t) => self.plane.log(
                    EventRecord::new(recv, Layer::Bus, "telemetry_rx", device)
                        .attr("uptime_s", t.uptime_s)
                        .attr("rssi", t.rssi)
                        .attr("src_ts", t.ts),
                ),
                Err(_) => self.plane.log(EventRecord::new(recv, Layer::Bus, "malformed", &env.topic)),
            },
            TopicKind::Control { verb } => {
                let target = String::from_utf8_lossy(&env.payload).trim().to_string();
                let verb = verb.to_string();
                let result = self.control(&verb, &target, now);
                let mut rec = EventRecord::new(now, Layer::Operation, "control", &verb)
                    .attr("target", target.clone())
                    .attr("ok", result.is_ok());
                if let Err(e) = result {
                    tracing::warn!(verb, target, error = %e, "control request rejected");
                    rec = rec.attr("error", e.to_string());
                }
                self.plane.log(rec);
            }
            TopicKind::Cmd { .. } | TopicKind::Notify | TopicKind::Other => {}
        }
    }

    /// Manual controls; the same entry points the control topic reaches.
    pub fn control(&mut self, verb: &str, target: &str, now: u64) -> Result<(), ControlError> {
        self.now = self.now.max(now);
        match verb {
            "run" => self.ops.run(target, &mut self.plane, now).map(drop)?,
            "fault" => self.ops.fault(target, "manual", &mut self.plane, now)?,
            "clear" => self.ops.clear(target, &mut self.plane, now)?,
            "activate" => self.routines.set_active(target, true, &mut self.plane, now)?,
            "deactivate" => self.routines.set_active(target, false, &mut self.plane, now)?,
            "trigger" => {
                self.plane.externals.insert(target.to_string());
            }
            "disconnect" => self.link_requests.push((target.to_string(), false)),
            "reconnect" => self.link_requests.push((target.to_string(), true)),
            other => return Err(ControlError::UnknownVerb(other.to_string())),
        }
        self.settle(now);
        Ok(())
    }

    pub fn run_operation(&mut self, op_id: &str, now: u64) -> Result<String, OperationError> {
        self.now = self.now.max(now);
        let token = self.ops.run(op_id, &mut self.plane, now)?;
        self.settle(now);
        self.flush();
        Ok(token)
    }

    pub fn finish(&mut self) -> Result<(), LogError> {
        self.flush();
        self.log.finish()
    }
}

/// Builds the control envelope `inject` and scenarios publish.
pub fn control_envelope(verb: &str, target: &str, now: u64) -> Envelope {
    Envelope::new(control_topic(verb), target.as_bytes().to_vec(), Qos::AtLeastOnce, now)
}

pub fn is_control_topic(topic: &str) -> bool {
    topic.starts_with(CONTROL_PREFIX)
}

/// Controller, simulated plant and loopback bus advanced together on a
/// simulated clock. Fully deterministic for a given config and scenario.
pub struct World {
    clock: SimClock,
    bus: LoopbackBus,
    sim: Option<PlantSim>,
    ctl: Controller,
    pending: VecDeque<ScenarioEvent>,
    start_ms: u64,
    last_step: Option<u64>,
}

impl World {
    pub fn new(cfg: &PlantConfig, log: EventLog) -> Result<Self, RuntimeError> {
        let resolved = cfg.resolve()?;
        Self::with_resolved(cfg, resolved, log)
    }

    pub fn with_resolved(cfg: &PlantConfig, resolved: Resolved, log: EventLog) -> Result<Self, RuntimeError> {
        let start = cfg.sim.epoch_ms;
        let clock = SimClock::new(start);
        let shared: Arc<dyn Clock> = Arc::new(clock.clone());
        let bus = LoopbackBus::new(Arc::clone(&shared), resolved.loopback.clone());
        let ctl = Controller::new(resolved, cfg.timing.clone(), Box::new(bus.clone()), log, start)?;
        let sim = if cfg.sim.enabled {
            let mut sim = PlantSim::new(&cfg.devices, cfg.sim.params(), Box::new(bus.clone()), shared)?;
            sim.start()?;
            Some(sim)
        } else {
            None
        };
        let mut world = Self {
            clock,
            bus,
            sim,
            ctl,
            pending: VecDeque::new(),
            start_ms: start,
            last_step: None,
        };
        world.step_at(start)?;
        Ok(world)
    }

    pub fn load_scenario(&mut self, scenario: &Scenario) {
        for e in &scenario.events {
            let at = e.at_ms;
            let pos = self.pending.partition_point(|p| p.at_ms <= at);
            self.pending.insert(pos, e.clone());
        }
    }

    pub fn now(&self) -> u64 {
        self.clock.now_ms()
    }

    /// Milliseconds since the run started.
    pub fn elapsed_ms(&self) -> u64 {
        self.now() - self.start_ms
    }

    pub fn start_ms(&self) -> u64 {
        self.start_ms
    }

    pub fn controller(&self) -> &Controller {
        &self.ctl
    }

    pub fn controller_mut(&mut self) -> &mut Controller {
        &mut self.ctl
    }

    pub fn sim(&self) -> Option<&PlantSim> {
        self.sim.as_ref()
    }

    pub fn bus(&self) -> &LoopbackBus {
        &self.bus
    }

    fn next_due(&self) -> Option<u64> {
        [
            self.bus.next_due(),
            self.sim.as_ref().and_then(PlantSim::next_due),
            self.ctl.next_due(),
            self.pending.front().map(|e| self.start_ms + e.at_ms),
        ]
        .into_iter()
        .flatten()
        .min()
    }

    /// Advances to `start + rel_ms`, processing everything due on the way.
    pub fn run_until(&mut self, rel_ms: u64) -> Result<(), RuntimeError> {
        let end = self.start_ms + rel_ms;
        loop {
            let floor = self.last_step.map(|t| t + 1).unwrap_or(0);
            match self.next_due() {
                Some(t) if t <= end => {
                    let t = t.max(floor).max(self.now());
                    if t > end {
                        break;
                    }
                    self.clock.advance_to(t);
                    self.step_at(t)?;
                }
                _ => break,
            }
        }
        self.clock.advance_to(end);
        Ok(())
    }

    pub fn run_for(&mut self, ms: u64) -> Result<(), RuntimeError> {
        self.run_until(self.elapsed_ms() + ms)
    }

    /// Runs until `pred` holds or `limit_ms` of simulated time pass. Returns whether it held.
    pub fn run_while(&mut self, limit_ms: u64, mut pred: impl FnMut(&World) -> bool) -> Result<bool, RuntimeError> {
        let end = self.elapsed_ms() + limit_ms;
        while !pred(self) {
            if self.elapsed_ms() >= end {
                return Ok(false);
            }
            let next = self.next_due().map(|t| t - self.start_ms).unwrap_or(end).clamp(self.elapsed_ms() + 1, end);
            self.run_until(next)?;
        }
        Ok(true)
    }

    fn step_at(&mut self, now: u64) -> Result<(), RuntimeError> {
        self.last_step = Some(now);
        while self.pending.front().is_some_and(|e| self.start_ms + e.at_ms <= now) {
            let ev = self.pending.pop_front().expect("peeked");
            if let Err(e) = self.apply(&ev.action) {
                tracing::warn!(error = %e, "scenario action failed");
                self.ctl.record(EventRecord::new(now, Layer::Sim, "action_failed", "scenario").attr("error", e.to_string()));
            }
        }
        // zero-delay traffic can bounce between sim and controller within one instant
        for _ in 0..16 {
            self.bus.pump(now);
            if let Some(sim) = &mut self.sim {
                sim.step(now);
            }
            self.ctl.step(now);
            for (device, online) in self.ctl.take_link_requests() {
                if let Err(e) = self.set_link_state(&device, online) {
                    tracing::warn!(device, error = %e, "link request failed");
                }
            }
            if let Some(sim) = &mut self.sim {
                for rec in sim.drain_events() {
                    self.ctl.record(rec);
                }
            }
            if !self.bus.next_due().is_some_and(|t| t <= now) {
                break;
            }
        }
        Ok(())
    }

    fn set_link_state(&mut self, device: &str, online: bool) -> Result<(), RuntimeError> {
        let sim = self.sim.as_mut().ok_or_else(|| RuntimeError::NoSim("link state".into()))?;
        sim.set_link_state(device, online)?;
        Ok(())
    }

    fn sim_mut(&mut self, what: &str) -> Result<&mut PlantSim, RuntimeError> {
        self.sim.as_mut().ok_or_else(|| RuntimeError::NoSim(what.to_string()))
    }

    /// Applies one scenario action at the current instant.
    pub fn apply(&mut self, action: &Action) -> Result<(), RuntimeError> {
        if let Some((verb, target)) = action.control() {
            self.bus.publish(control_envelope(verb, target, self.now()))?;
            return Ok(());
        }
        match action {
            Action::SetLinkState { device, online } => self.set_link_state(device, *online)?,
            Action::SetLinkDelay { device, delay } => self.bus.set_link_delay(device, *delay),
            Action::InjectStuckValve { device, io } => self.sim_mut("stuck valve")?.inject_fault(device, *io, Some(ChannelFault::Stuck))?,
            Action::InjectDeadFeedback { device, io } => {
                self.sim_mut("dead feedback")?.inject_fault(device, *io, Some(ChannelFault::DeadFeedback))?
            }
            Action::ClearChannelFault { device, io } => self.sim_mut("channel fault")?.inject_fault(device, *io, None)?,
            Action::SetSensorTrace { device, io, signal } => self.sim_mut("sensor trace")?.set_sensor_trace(device, *io, signal.clone())?,
            _ => unreachable!("control actions handled above"),
        }
        if let Some(sim) = &mut self.sim {
            for rec in sim.drain_events() {
                self.ctl.record(rec);
            }
        }
        Ok(())
    }

    /// Flushes the log and hands it back.
    pub fn finish(mut self) -> Result<EventLog, RuntimeError> {
        self.ctl.finish()?;
        let log = std::mem::replace(&mut self.ctl.log, EventLog::discard());
        Ok(log)
    }
}

#[cfg(feature = "mqtt")]
pub mod realtime {
    //! Wall-clock runner against an external broker.

    use std::sync::Arc;
    use std::time::{Duration, Instant};

    use super::*;
    use crate::bus::MqttTransport;
    use crate::clock::SystemClock;

    pub fn run(cfg: &PlantConfig, scenario: &Scenario, log: EventLog, until: Option<Duration>) -> Result<EventLog, RuntimeError> {
        let resolved = cfg.resolve()?;
        let clock: Arc<dyn Clock> = Arc::new(SystemClock::new());
        let start = clock.now_ms();
        let server = MqttTransport::connect(&cfg.broker.url, "plantctl", Arc::clone(&clock))?;
        let mut ctl = Controller::new(resolved, cfg.timing.clone(), Box::new(server), log, start)?;
        let mut sim = if cfg.sim.enabled {
            let devices = MqttTransport::connect(&cfg.broker.url, "plantsim", Arc::clone(&clock))?;
            let mut sim = PlantSim::new(&cfg.devices, cfg.sim.params(), Box::new(devices), Arc::clone(&clock))?;
            sim.start()?;
            Some(sim)
        } else {
            None
        };
        let mut control = MqttTransport::connect(&cfg.broker.url, "plantctl-scenario", Arc::clone(&clock))?;
        let mut pending: VecDeque<ScenarioEvent> = scenario.events.iter().cloned().collect();
        let began = Instant::now();
        loop {
            let now = clock.now_ms();
            while pending.front().is_some_and(|e| start + e.at_ms <= now) {
                let ev = pending.pop_front().expect("peeked");
                let res = match (&ev.action.control(), sim.as_mut()) {
                    (Some((verb, target)), _) => control.publish(control_envelope(verb, target, now)).map(drop).map_err(RuntimeError::from),
                    (None, Some(sim)) => apply_to_sim(sim, &ev.action),
                    (None, None) => Err(RuntimeError::NoSim("scenario action".into())),
                };
                if let Err(e) = res {
                    tracing::warn!(error = %e, "scenario action failed");
                }
            }
            if let Some(sim) = &mut sim {
                sim.step(now);
            }
            ctl.step(now);
            for (device, online) in ctl.take_link_requests() {
                if let Some(sim) = &mut sim {
                    if let Err(e) = sim.set_link_state(&device, online) {
                        tracing::warn!(device, error = %e, "link request failed");
                    }
                }
            }
            if let Some(sim) = &mut sim {
                for rec in sim.drain_events() {
                    ctl.record(rec);
                }
            }
            if until.is_some_and(|u| began.elapsed() >= u) {
                break;
            }
            let next = [sim.as_ref().and_then(PlantSim::next_due), ctl.next_due()].into_iter().flatten().min();
            let wait = next.map(|t| t.saturating_sub(clock.now_ms())).unwrap_or(50).clamp(1, 50);
            std::thread::sleep(Duration::from_millis(wait));
        }
        ctl.finish()?;
        Ok(std::mem::replace(&mut ctl.log, EventLog::discard()))
    }

    fn apply_to_sim(sim: &mut PlantSim, action: &Action) -> Result<(), RuntimeError> {
        match action {
            Action::SetLinkState { device, online } => sim.set_link_state(device, *online)?,
            Action::InjectStuckValve { device, io } => sim.inject_fault(device, *io, Some(ChannelFault::Stuck))?,
            Action::InjectDeadFeedback { device, io } => sim.inject_fault(device, *io, Some(ChannelFault::DeadFeedback))?,
            Action::ClearChannelFault { device, io } => sim.inject_fault(device, *io, None)?,
            Action::SetSensorTrace { device, io, signal } => sim.set_sensor_trace(device, *io, signal.clone())?,
            Action::SetLinkDelay { .. } => return Err(RuntimeError::NoSim("link delay on an external broker".into())),
            _ => {}
        }
        Ok(())
    }
}
