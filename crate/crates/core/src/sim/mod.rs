//! Simulated device fleet honouring the field gateway contract: every channel
//! sampled and published at 1 Hz, commands executed asynchronously after a
//! processing latency, telemetry once a minute, a retained `offline` last
//! will, and pumps paused while the link is down.

mod signal;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use signal::Signal;

use crate::bus::wire::{
    self, cmd_topic, encode, state_topic, status_topic, telemetry_topic, CmdPayload, StatePayload, TelemetryPayload, STATUS_OFFLINE,
    STATUS_ONLINE,
};
use crate::bus::{BusError, DelayModel, Envelope, Inbox, Qos, SubscriptionId, Transport};
use crate::clock::Clock;
use crate::metrics::{EventRecord, Layer};

pub const TICK_MS: u64 = 1_000;
pub const TELEMETRY_EVERY: u64 = 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChannelSpec {
    Valve {
        io: u32,
        #[serde(default)]
        initial: f64,
    },
    Pump {
        io: u32,
        /// Optional flow reading published on its own channel.
        #[serde(default)]
        flow_io: Option<u32>,
        #[serde(default)]
        pressure_io: Option<u32>,
        #[serde(default = "default_flow")]
        nominal_flow: f64,
        #[serde(default = "default_pressure")]
        nominal_pressure: f64,
    },
    Sensor {
        io: u32,
        signal: Signal,
    },
}

fn default_flow() -> f64 {
    100.0
}

fn default_pressure() -> f64 {
    50.0
}

impl ChannelSpec {
    /// Every channel number this device publishes on.
    pub fn ios(&self) -> Vec<u32> {
        match self {
            ChannelSpec::Valve { io, .. } | ChannelSpec::Sensor { io, .. } => vec![*io],
            ChannelSpec::Pump { io, flow_io, pressure_io, .. } => {
                std::iter::once(*io).chain(*flow_io).chain(*pressure_io).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub id: String,
    pub channels: Vec<ChannelSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SimParams {
    #[serde(default = "default_sweep")]
    pub sweep_time_s: f64,
    /// Delay between command receipt and the device acting on it.
    #[serde(default = "default_latency")]
    pub command_latency: DelayModel,
    /// After reconnecting, pumps stay paused this long so retained commands can land.
    #[serde(default = "default_replay_window")]
    pub replay_window_ms: u64,
    #[serde(default)]
    pub seed: u64,
}

fn default_sweep() -> f64 {
    4.0
}

fn default_latency() -> DelayModel {
    DelayModel::Uniform { lo_ms: 0.0, hi_ms: 1000.0 }
}

fn default_replay_window() -> u64 {
    1_000
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            sweep_time_s: default_sweep(),
            command_latency: default_latency(),
            replay_window_ms: default_replay_window(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum ChannelFault {
    /// Actuator ignores its target; feedback keeps reporting the frozen position.
    Stuck,
    /// Channel stops publishing.
    DeadFeedback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimValve {
    pub device: String,
    pub io: u32,
    pub position: f64,
    pub target: f64,
    pub sweep_time_s: f64,
    pub moving: bool,
    start_pending: bool,
}

impl SimValve {
    fn rate_per_s(&self) -> f64 {
        100.0 / self.sweep_time_s
    }

    fn set_target(&mut self, value: f64) {
        self.target = value.clamp(0.0, 100.0);
        if !self.moving && (self.target - self.position).abs() > f64::EPSILON {
            self.start_pending = true;
        }
    }

    fn advance(&mut self, dt_s: f64, stuck: bool) {
        if stuck {
            self.moving = false;
            self.start_pending = false;
            return;
        }
        if self.moving {
            let step = self.rate_per_s() * dt_s;
            let delta = self.target - self.position;
            if delta.abs() <= step {
                self.position = self.target;
                self.moving = false;
            } else {
                self.position += step.copysign(delta);
            }
        }
        if self.start_pending {
            self.start_pending = false;
            self.moving = (self.target - self.position).abs() > f64::EPSILON;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimPump {
    pub device: String,
    pub io: u32,
    pub running: bool,
    pub paused_by_disconnect: bool,
    pub head_pressure: f64,
    pub flow_rate: f64,
    flow_io: Option<u32>,
    pressure_io: Option<u32>,
    nominal_flow: f64,
    nominal_pressure: f64,
}

impl SimPump {
    /// Relay output actually driving the motor.
    pub fn output(&self) -> bool {
        self.running && !self.paused_by_disconnect
    }

    fn advance(&mut self, stuck: bool) {
        if stuck {
            return;
        }
        if self.output() {
            self.flow_rate = self.nominal_flow;
            self.head_pressure = self.nominal_pressure;
        } else {
            self.flow_rate = 0.0;
            self.head_pressure = 0.0;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSensor {
    pub device: String,
    pub io: u32,
    pub signal: Signal,
}

struct SimDevice {
    id: String,
    online: bool,
    tick_offset_ms: u64,
    ticks: u64,
    boot_ts: u64,
    last_tick_ts: Option<u64>,
    valves: BTreeMap<u32, SimValve>,
    pumps: BTreeMap<u32, SimPump>,
    sensors: BTreeMap<u32, SimSensor>,
    /// Scripted override for pump flow/pressure channels.
    overrides: BTreeMap<u32, Signal>,
    faults: BTreeMap<u32, ChannelFault>,
    last_token: BTreeMap<u32, String>,
    resume_at: Option<u64>,
    /// Commands are processed in arrival order; none applies before this.
    busy_until: u64,
    inbox: Inbox,
    sub: Option<SubscriptionId>,
}

impl SimDevice {
    fn has_channel(&self, io: u32) -> bool {
        self.valves.contains_key(&io) || self.pumps.contains_key(&io)
    }

    fn pump_of_aux(&self, io: u32) -> Option<(&SimPump, bool)> {
        self.pumps.values().find_map(|p| {
            if p.flow_io == Some(io) {
                Some((p, true))
            } else if p.pressure_io == Some(io) {
                Some((p, false))
            } else {
                None
            }
        })
    }

    /// Current channel readings in channel order.
    fn readings(&self, t_s: f64) -> Vec<(u32, f64)> {
        let mut out: BTreeMap<u32, f64> = BTreeMap::new();
        for (io, v) in &self.valves {
            out.insert(*io, v.position);
        }
        for (io, p) in &self.pumps {
            out.insert(*io, if p.output() { 1.0 } else { 0.0 });
            if let Some(f) = p.flow_io {
                out.insert(f, p.flow_rate);
            }
            if let Some(pr) = p.pressure_io {
                out.insert(pr, p.head_pressure);
            }
        }
        for (io, s) in &self.sensors {
            out.insert(*io, s.signal.at(t_s));
        }
        for (io, sig) in &self.overrides {
            if let Some((pump, _)) = self.pump_of_aux(*io) {
                // scripted traces describe the running pump; a stopped pump reads zero
                out.insert(*io, if pump.output() { sig.at(t_s) } else { 0.0 });
            }
        }
        out.into_iter()
            .filter(|(io, _)| self.faults.get(io) != Some(&ChannelFault::DeadFeedback))
            .map(|(io, v)| (io, (v * 1000.0).round() / 1000.0))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum SimEvent {
    Tick { device: String },
    Apply { device: String, io: u32, value_milli: i64, token: String },
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown device {0:?}")]
    UnknownDevice(String),
    #[error("device {device:?} has no channel {io}")]
    UnknownChannel { device: String, io: u32 },
    #[error("duplicate channel {io} on {device:?}")]
    DuplicateChannel { device: String, io: u32 },
    #[error("duplicate device {0:?}")]
    DuplicateDevice(String),
    #[error(transparent)]
    Bus(#[from] BusError),
}

pub struct PlantSim {
    devices: BTreeMap<String, SimDevice>,
    params: SimParams,
    transport: Box<dyn Transport>,
    clock: Arc<dyn Clock>,
    rng: ChaCha8Rng,
    schedule: BinaryHeap<Reverse<(u64, u64, SimEvent)>>,
    seq: u64,
    start_ts: u64,
    events: Vec<EventRecord>,
}

impl PlantSim {
    pub fn new(specs: &[DeviceSpec], params: SimParams, transport: Box<dyn Transport>, clock: Arc<dyn Clock>) -> Result<Self, SimError> {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let now = clock.now_ms();
        let mut devices = BTreeMap::new();
        for spec in specs {
            if devices.contains_key(&spec.id) {
                return Err(SimError::DuplicateDevice(spec.id.clone()));
            }
            let mut dev = SimDevice {
                id: spec.id.clone(),
                online: false,
                tick_offset_ms: rng.random_range(0..TICK_MS),
                ticks: 0,
                boot_ts: now,
                last_tick_ts: None,
                valves: BTreeMap::new(),
                pumps: BTreeMap::new(),
                sensors: BTreeMap::new(),
                overrides: BTreeMap::new(),
                faults: BTreeMap::new(),
                last_token: BTreeMap::new(),
                resume_at: None,
                busy_until: 0,
                inbox: Inbox::new(),
                sub: None,
            };
            let mut used = std::collections::BTreeSet::new();
            for ch in &spec.channels {
                for io in ch.ios() {
                    if !used.insert(io) {
                        return Err(SimError::DuplicateChannel { device: spec.id.clone(), io });
                    }
                }
                match ch {
                    ChannelSpec::Valve { io, initial } => {
                        dev.valves.insert(
                            *io,
                            SimValve {
                                device: spec.id.clone(),
                                io: *io,
                                position: initial.clamp(0.0, 100.0),
                                target: initial.clamp(0.0, 100.0),
                                sweep_time_s: params.sweep_time_s,
                                moving: false,
                                start_pending: false,
                            },
                        );
                    }
                    ChannelSpec::Pump {
                        io,
                        flow_io,
                        pressure_io,
                        nominal_flow,
                        nominal_pressure,
                    } => {
                        dev.pumps.insert(
                            *io,
                            SimPump {
                                device: spec.id.clone(),
                                io: *io,
                                running: false,
                                paused_by_disconnect: false,
                                head_pressure: 0.0,
                                flow_rate: 0.0,
                                flow_io: *flow_io,
                                pressure_io: *pressure_io,
                                nominal_flow: *nominal_flow,
                                nominal_pressure: *nominal_pressure,
                            },
                        );
                    }
                    ChannelSpec::Sensor { io, signal } => {
                        dev.sensors.insert(
                            *io,
                            SimSensor {
                                device: spec.id.clone(),
                                io: *io,
                                signal: signal.clone(),
                            },
                        );
                    }
                }
            }
            devices.insert(spec.id.clone(), dev);
        }
        Ok(Self {
            devices,
            params,
            transport,
            clock,
            rng,
            schedule: BinaryHeap::new(),
            seq: 0,
            start_ts: now,
            events: Vec::new(),
        })
    }

    fn push(&mut self, at: u64, ev: SimEvent) {
        self.seq += 1;
        self.schedule.push(Reverse((at, self.seq, ev)));
    }

    fn note(&mut self, kind: &str, subject: &str) -> &mut EventRecord {
        let ts = self.clock.now_ms();
        self.events.push(EventRecord::new(ts, Layer::Sim, kind, subject));
        self.events.last_mut().expect("just pushed")
    }

    /// Connects every device and schedules its first tick.
    pub fn start(&mut self) -> Result<(), SimError> {
        let now = self.clock.now_ms();
        let ids: Vec<String> = self.devices.keys().cloned().collect();
        for id in ids {
            self.connect(&id)?;
            let offset = self.devices[&id].tick_offset_ms;
            self.push(now + offset, SimEvent::Tick { device: id });
        }
        Ok(())
    }

    fn connect(&mut self, id: &str) -> Result<(), SimError> {
        let now = self.clock.now_ms();
        let dev = self.devices.get_mut(id).ok_or_else(|| SimError::UnknownDevice(id.to_string()))?;
        self.transport.open_session(id)?;
        let will = Envelope::new(status_topic(id), STATUS_OFFLINE, Qos::AtLeastOnce, now).retained();
        self.transport.register_last_will(id, will)?;
        let sub = self
            .transport
            .subscribe_as(id, &format!("dev/{id}/io/+/cmd"), dev.inbox.handler())?;
        dev.sub = Some(sub);
        dev.online = true;
        self.transport
            .publish(Envelope::new(status_topic(id), STATUS_ONLINE, Qos::AtLeastOnce, now).retained())?;
        Ok(())
    }

    pub fn next_due(&self) -> Option<u64> {
        self.schedule.peek().map(|Reverse((at, _, _))| *at)
    }

    /// Handles received commands, then every scheduled event due at `now`.
    pub fn step(&mut self, now: u64) {
        self.drain_inboxes(now);
        while let Some(Reverse((at, _, _))) = self.schedule.peek() {
            if *at > now {
                break;
            }
            let Reverse((at, _, ev)) = self.schedule.pop().expect("peeked");
            match ev {
                SimEvent::Tick { device } => {
                    self.tick(&device, at);
                    self.push(at + TICK_MS, SimEvent::Tick { device });
                }
                SimEvent::Apply {
                    device,
                    io,
                    value_milli,
                    token,
                } => self.on_command(&device, io, value_milli as f64 / 1000.0, &token),
            }
        }
    }

    fn drain_inboxes(&mut self, now: u64) {
        let ids: Vec<String> = self.devices.keys().cloned().collect();
        for id in ids {
            let envs = self.devices[&id].inbox.drain();
            for env in envs {
                let wire::TopicKind::Cmd { io, .. } = wire::classify(&env.topic) else {
                    continue;
                };
                let Ok(cmd) = wire::decode::<CmdPayload>(&env.topic, &env.payload) else {
                    tracing::warn!(topic = %env.topic, "ignoring malformed command");
                    continue;
                };
                if env.retain {
                    // replayed state on reconnect is restored immediately
                    self.on_command(&id, io, cmd.value, &cmd.token);
                } else {
                    let delay = self.params.command_latency.sample(&mut self.rng);
                    let dev = self.devices.get_mut(&id).expect("listed");
                    let at = (now + delay).max(dev.busy_until);
                    dev.busy_until = at;
                    self.push(
                        at,
                        SimEvent::Apply {
                            device: id.clone(),
                            io,
                            value_milli: (cmd.value * 1000.0).round() as i64,
                            token: cmd.token,
                        },
                    );
                }
            }
        }
    }

    /// Executes one command on a device channel. Repeats of the last token are no-ops.
    pub fn on_command(&mut self, device: &str, io: u32, value: f64, token: &str) {
        let Some(dev) = self.devices.get_mut(device) else {
            tracing::warn!(device, "command for unknown device");
            return;
        };
        if !dev.has_channel(io) {
            tracing::warn!(device, io, "command for unknown channel ignored");
            self.note("unknown_channel", device).attrs.insert("io".into(), io.into());
            return;
        }
        if dev.last_token.get(&io).map(String::as_str) == Some(token) {
            return;
        }
        dev.last_token.insert(io, token.to_string());
        if let Some(v) = dev.valves.get_mut(&io) {
            v.set_target(value);
        } else if let Some(p) = dev.pumps.get_mut(&io) {
            p.running = value != 0.0;
            if !p.output() {
                p.flow_rate = 0.0;
            }
        }
    }

    /// Advances physics to `now` and, when online, publishes one state
    /// envelope per channel (plus telemetry every 60th tick).
    pub fn tick(&mut self, device: &str, now: u64) -> Vec<Envelope> {
        let t_s = now.saturating_sub(self.start_ts) as f64 / 1000.0;
        let Some(dev) = self.devices.get_mut(device) else {
            return Vec::new();
        };
        let dt_s = dev.last_tick_ts.map(|t| now.saturating_sub(t) as f64 / 1000.0).unwrap_or(0.0);
        dev.last_tick_ts = Some(now);
        dev.ticks += 1;
        if dev.online && dev.resume_at.is_some_and(|t| t <= now) {
            dev.resume_at = None;
            for p in dev.pumps.values_mut() {
                p.paused_by_disconnect = false;
            }
        }
        for v in dev.valves.values_mut() {
            let stuck = dev.faults.get(&v.io) == Some(&ChannelFault::Stuck);
            v.advance(dt_s, stuck);
        }
        for p in dev.pumps.values_mut() {
            let stuck = dev.faults.get(&p.io) == Some(&ChannelFault::Stuck);
            p.advance(stuck);
        }
        if !dev.online {
            return Vec::new();
        }
        let mut out: Vec<Envelope> = dev
            .readings(t_s)
            .into_iter()
            .map(|(io, value)| {
                Envelope::new(state_topic(&dev.id, io), encode(&StatePayload { value, ts: now }), Qos::AtMostOnce, now)
            })
            .collect();
        if dev.ticks % TELEMETRY_EVERY == 0 {
            let payload = TelemetryPayload {
                uptime_s: now.saturating_sub(dev.boot_ts) / 1000,
                rssi: -55.0 - self.rng.random_range(0..20) as f64,
                ts: now,
            };
            out.push(Envelope::new(telemetry_topic(&dev.id), encode(&payload), Qos::AtMostOnce, now));
        }
        for env in &out {
            if let Err(e) = self.transport.publish(env.clone()) {
                tracing::warn!(device, error = %e, "device publish failed");
            }
        }
        out
    }

    /// Drops or restores a device's broker connection.
    pub fn set_link_state(&mut self, device: &str, online: bool) -> Result<(), SimError> {
        let now = self.clock.now_ms();
        let dev = self.devices.get_mut(device).ok_or_else(|| SimError::UnknownDevice(device.to_string()))?;
        if dev.online == online {
            return Ok(());
        }
        if online {
            dev.resume_at = Some(now + self.params.replay_window_ms);
            self.connect(device)?;
        } else {
            dev.online = false;
            dev.resume_at = None;
            dev.sub = None;
            for p in dev.pumps.values_mut() {
                p.paused_by_disconnect = true;
                p.flow_rate = 0.0;
                p.head_pressure = 0.0;
            }
            dev.inbox.drain();
            self.transport.close_session(device, false)?;
        }
        self.note("link", device).attrs.insert("online".into(), online.into());
        Ok(())
    }

    pub fn inject_fault(&mut self, device: &str, io: u32, fault: Option<ChannelFault>) -> Result<(), SimError> {
        let dev = self.devices.get_mut(device).ok_or_else(|| SimError::UnknownDevice(device.to_string()))?;
        if !dev.has_channel(io) && !dev.sensors.contains_key(&io) && dev.pump_of_aux(io).is_none() {
            return Err(SimError::UnknownChannel { device: device.into(), io });
        }
        match fault {
            Some(f) => {
                dev.faults.insert(io, f);
            }
            None => {
                dev.faults.remove(&io);
            }
        }
        let rec = self.note("channel_fault", device);
        rec.attrs.insert("io".into(), io.into());
        rec.attrs.insert("fault".into(), serde_json::to_value(fault).unwrap_or_default());
        Ok(())
    }

    pub fn set_sensor_trace(&mut self, device: &str, io: u32, signal: Signal) -> Result<(), SimError> {
        let dev = self.devices.get_mut(device).ok_or_else(|| SimError::UnknownDevice(device.to_string()))?;
        if let Some(s) = dev.sensors.get_mut(&io) {
            s.signal = signal;
        } else if dev.pump_of_aux(io).is_some() {
            dev.overrides.insert(io, signal);
        } else {
            return Err(SimError::UnknownChannel { device: device.into(), io });
        }
        self.note("trace_set", device).attrs.insert("io".into(), io.into());
        Ok(())
    }

    pub fn is_online(&self, device: &str) -> bool {
        self.devices.get(device).is_some_and(|d| d.online)
    }

    pub fn valve(&self, device: &str, io: u32) -> Option<&SimValve> {
        self.devices.get(device)?.valves.get(&io)
    }

    pub fn pump(&self, device: &str, io: u32) -> Option<&SimPump> {
        self.devices.get(device)?.pumps.get(&io)
    }

    pub fn ticks(&self, device: &str) -> u64 {
        self.devices.get(device).map(|d| d.ticks).unwrap_or(0)
    }

    pub fn device_ids(&self) -> impl Iterator<Item = &str> {
        self.devices.keys().map(String::as_str)
    }

    pub fn drain_events(&mut self) -> Vec<EventRecord> {
        std::mem::take(&mut self.events)
    }

    /// Sets the topic a raw command would arrive on; useful in tests.
    pub fn command_topic(device: &str, io: u32) -> String {
        cmd_topic(device, io)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bus::{LoopbackBus, LoopbackConfig};
    use crate::clock::SimClock;

    fn valve_panel() -> DeviceSpec {
        DeviceSpec {
            id: "ctrl-1".into(),
            channels: vec![
                ChannelSpec::Valve { io: 1, initial: 0.0 },
                ChannelSpec::Pump {
                    io: 17,
                    flow_io: Some(18),
                    pressure_io: None,
                    nominal_flow: 100.0,
                    nominal_pressure: 50.0,
                },
            ],
        }
    }

    fn sim() -> (SimClock, LoopbackBus, PlantSim) {
        let clock = SimClock::new(0);
        let bus = LoopbackBus::new(Arc::new(clock.clone()), LoopbackConfig::default());
        let params = SimParams {
            command_latency: DelayModel::Constant { ms: 0.0 },
            ..Default::default()
        };
        let sim = PlantSim::new(&[valve_panel()], params, Box::new(bus.clone()), Arc::new(clock.clone())).unwrap();
        (clock, bus, sim)
    }

    fn state_value(envs: &[Envelope], io: u32) -> f64 {
        let env = envs.iter().find(|e| e.topic == state_topic("ctrl-1", io)).unwrap();
        wire::decode::<StatePayload>(&env.topic, &env.payload).unwrap().value
    }

    #[test]
    fn full_sweep_takes_four_ticks() {
        let (_, _, mut sim) = sim();
        sim.start().unwrap();
        sim.tick("ctrl-1", 0);
        sim.on_command("ctrl-1", 1, 100.0, "t1");
        let first = sim.tick("ctrl-1", 1_000);
        assert!(sim.valve("ctrl-1", 1).unwrap().moving);
        assert_eq!(state_value(&first, 1), 0.0);
        let seq: Vec<f64> = (2..=5).map(|k| state_value(&sim.tick("ctrl-1", k * 1_000), 1)).collect();
        assert_eq!(seq, vec![25.0, 50.0, 75.0, 100.0]);
        assert!(!sim.valve("ctrl-1", 1).unwrap().moving);
    }

    #[test]
    fn pump_stop_zeroes_flow() {
        let (_, _, mut sim) = sim();
        sim.start().unwrap();
        sim.on_command("ctrl-1", 17, 1.0, "on");
        let envs = sim.tick("ctrl-1", 0);
        assert_eq!(state_value(&envs, 18), 100.0);
        sim.on_command("ctrl-1", 17, 0.0, "off");
        let envs = sim.tick("ctrl-1", 1_000);
        assert_eq!(state_value(&envs, 17), 0.0);
        assert_eq!(state_value(&envs, 18), 0.0);
    }

    #[test]
    fn duplicate_token_is_ignored() {
        let (_, _, mut sim) = sim();
        sim.start().unwrap();
        sim.on_command("ctrl-1", 1, 100.0, "t1");
        sim.tick("ctrl-1", 0);
        sim.tick("ctrl-1", 1_000);
        sim.on_command("ctrl-1", 1, 0.0, "t2");
        sim.on_command("ctrl-1", 1, 100.0, "t2");
        assert_eq!(sim.valve("ctrl-1", 1).unwrap().target, 0.0);
    }

    #[test]
    fn commands_apply_in_arrival_order() {
        let clock = SimClock::new(0);
        let mut bus = LoopbackBus::new(Arc::new(clock.clone()), LoopbackConfig::default());
        let params = SimParams {
            command_latency: DelayModel::Uniform { lo_ms: 0.0, hi_ms: 1000.0 },
            seed: 9,
            ..Default::default()
        };
        let mut sim = PlantSim::new(&[valve_panel()], params, Box::new(bus.clone()), Arc::new(clock.clone())).unwrap();
        sim.start().unwrap();
        for (i, v) in [100.0, 25.0, 75.0, 50.0].into_iter().enumerate() {
            let payload = wire::encode(&CmdPayload { value: v, ts: 0, token: format!("c{i}") });
            bus.publish(Envelope::new(cmd_topic("ctrl-1", 1), payload, Qos::AtLeastOnce, 0)).unwrap();
        }
        bus.pump(0);
        sim.step(0);
        clock.advance_to(5_000);
        sim.step(5_000);
        assert_eq!(sim.valve("ctrl-1", 1).unwrap().target, 50.0);
    }

    #[test]
    fn unknown_channel_is_ignored() {
        let (_, _, mut sim) = sim();
        sim.on_command("ctrl-1", 99, 1.0, "x");
        assert_eq!(sim.drain_events()[0].kind, "unknown_channel");
    }

    #[test]
    fn offline_pauses_pump_and_silences_device() {
        let (clock, mut bus, mut sim) = sim();
        sim.start().unwrap();
        let status = Inbox::new();
        bus.subscribe("dev/+/status", status.handler()).unwrap();
        sim.on_command("ctrl-1", 17, 1.0, "on");
        sim.set_link_state("ctrl-1", false).unwrap();
        assert!(!sim.pump("ctrl-1", 17).unwrap().output());
        assert!(sim.tick("ctrl-1", 1_000).is_empty());
        bus.pump(clock.now_ms());
        let got = status.drain();
        assert_eq!(got.last().unwrap().payload, b"offline");

        sim.set_link_state("ctrl-1", true).unwrap();
        sim.tick("ctrl-1", 500);
        assert!(!sim.pump("ctrl-1", 17).unwrap().output(), "still inside replay window");
        sim.tick("ctrl-1", 1_000);
        assert!(sim.pump("ctrl-1", 17).unwrap().output());
    }

    #[test]
    fn stuck_valve_never_moves() {
        let (_, _, mut sim) = sim();
        sim.start().unwrap();
        sim.inject_fault("ctrl-1", 1, Some(ChannelFault::Stuck)).unwrap();
        sim.on_command("ctrl-1", 1, 100.0, "t");
        for k in 0..10 {
            sim.tick("ctrl-1", k * 1_000);
        }
        assert_eq!(sim.valve("ctrl-1", 1).unwrap().position, 0.0);
    }

    #[test]
    fn telemetry_every_sixtieth_tick() {
        let (_, _, mut sim) = sim();
        sim.start().unwrap();
        let mut telemetry = 0;
        for k in 0..180 {
            telemetry += sim
                .tick("ctrl-1", k * 1_000)
                .iter()
                .filter(|e| e.topic.ends_with("/telemetry"))
                .count();
        }
        assert_eq!(telemetry, 3);
    }
}
