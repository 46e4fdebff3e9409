use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use plantctl::actuator::{ActuatorBinding, ActuatorKind, ActuatorLayer, DispatchMode, Phase};
use plantctl::bus::wire::{cmd_topic, encode, CmdPayload};
use plantctl::bus::{DelayModel, Envelope, Inbox, LoopbackBus, LoopbackConfig, Qos, Transport};
use plantctl::clock::{Clock, SimClock};
use plantctl::config::PlantConfig;
use plantctl::interlock::{Interlock, Owner};
use plantctl::metrics::{EventLog, Layer};
use plantctl::runtime::World;
use plantctl::scenario::{Action, Scenario};
use plantctl::sim::{ChannelSpec, DeviceSpec, PlantSim, SimParams};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bus_keeps_fifo_per_topic(
        msgs in prop::collection::vec((0usize..3, 0u32..3, 0u64..400), 1..120),
        sd in 0.0f64..300.0,
    ) {
        let clock = SimClock::new(0);
        let shared: Arc<dyn Clock> = Arc::new(clock.clone());
        let mut bus = LoopbackBus::new(shared, LoopbackConfig {
            default_delay: DelayModel::Normal { mean_ms: 150.0, sd_ms: sd },
            seed: 11,
            ..Default::default()
        });
        let inbox = Inbox::new();
        bus.subscribe("dev/#", inbox.handler()).unwrap();
        let mut seq = 0u64;
        for (dev, io, gap) in msgs {
            let now = clock.now_ms() + gap;
            clock.advance_to(now);
            bus.pump(now);
            seq += 1;
            bus.publish(Envelope::new(format!("dev/d{dev}/io/{io}/state"), seq.to_string(), Qos::AtLeastOnce, now)).unwrap();
        }
        while let Some(t) = bus.next_due() {
            clock.advance_to(t);
            bus.pump(t);
        }
        let mut last: BTreeMap<String, u64> = BTreeMap::new();
        for env in inbox.drain() {
            let n: u64 = env.payload_str().unwrap().parse().unwrap();
            let prev = last.insert(env.topic.clone(), n);
            prop_assert!(prev.is_none_or(|p| p < n), "{} reordered: {prev:?} then {n}", env.topic);
        }
    }

    #[test]
    fn actuator_phases_follow_allowed_edges(ops in prop::collection::vec((0u8..5, 0u8..5, 0u64..3000), 1..80)) {
        let mut layer = ActuatorLayer::new([ActuatorBinding {
            system_id: "V1".into(),
            kind: ActuatorKind::Valve,
            device: "d".into(),
            io: 1,
            tolerance: 2.0,
            idle_value: 0.0,
        }]).unwrap();
        let mut now = 0;
        let mut phase = Phase::Idle;
        for (i, (op, v, gap)) in ops.into_iter().enumerate() {
            now += gap;
            let value = f64::from(v) * 25.0;
            // a new command first retires a stopped one
            let via_idle = |from: Phase, to: Phase| op < 2 && from.can_transition(Phase::Idle) && Phase::Idle.can_transition(to);
            match op {
                0 => { let _ = layer.dispatch("V1", value, &format!("t{i}"), now); }
                1 => { let _ = layer.dispatch_with("V1", value, &format!("l{i}"), now, DispatchMode::Lockout); }
                2 | 3 => { layer.ingest_feedback("d", 1, value, now); }
                _ => { layer.fault_scan(now); }
            }
            let next = layer.record("V1").unwrap().phase;
            prop_assert!(next == phase || phase.can_transition(next) || via_idle(phase, next), "{phase:?} -> {next:?}");
            phase = next;
        }
    }

    #[test]
    fn interlock_state_stays_consistent(
        evs in prop::collection::vec((0u8..4, 0usize..6, 1u32..32), 1..60),
    ) {
        let resources: Vec<String> = (0..5).map(|r| format!("r{r}")).collect();
        let mut il = Interlock::new(resources.clone());
        for op in 0..6 {
            il.register(&format!("op{op}"), (op as i64 * 7) % 11).unwrap();
        }
        for (kind, op, mask) in evs {
            let op_id = format!("op{op}");
            match kind {
                0 => {
                    let wanted: BTreeSet<String> = (0..5).filter(|r| mask & (1 << r) != 0).map(|r| resources[r].clone()).collect();
                    il.acquire(&op_id, &wanted, "t", 0).unwrap();
                }
                1 => { il.release(&op_id, "t", 0); }
                2 => { il.fault(&op_id, "t"); }
                _ => { let _ = il.clear_fault(&resources[op % 5], 0); }
            }
            let q = il.queue();
            prop_assert!(q.windows(2).all(|w| w[0].priority > w[1].priority));
            let ids: BTreeSet<&str> = q.iter().map(|e| e.op_id.as_str()).collect();
            prop_assert_eq!(ids.len(), q.len());
            for e in q {
                prop_assert!(!e.wanted.iter().all(|r| il.owner(r) == Some(&Owner::Free)), "{} left waiting on free resources", e.op_id);
            }
        }
    }

    #[test]
    fn valve_settles_on_last_target(cmds in prop::collection::vec((0u8..=4, 0u64..6000), 1..12), seed in any::<u64>()) {
        let clock = SimClock::new(1_000_000);
        let shared: Arc<dyn Clock> = Arc::new(clock.clone());
        let mut bus = LoopbackBus::new(Arc::clone(&shared), LoopbackConfig {
            default_delay: DelayModel::Uniform { lo_ms: 0.0, hi_ms: 200.0 },
            seed,
            ..Default::default()
        });
        let spec = DeviceSpec { id: "ctrl-1".into(), channels: vec![ChannelSpec::Valve { io: 1, initial: 0.0 }] };
        let mut sim = PlantSim::new(&[spec], SimParams { seed, ..Default::default() }, Box::new(bus.clone()), shared).unwrap();
        sim.start().unwrap();
        let mut last = 0.0;
        let run = |sim: &mut PlantSim, bus: &mut LoopbackBus, until: u64| -> Result<(), TestCaseError> {
            loop {
                let next = [bus.next_due(), sim.next_due()].into_iter().flatten().min();
                match next {
                    Some(t) if t <= until => {
                        clock.advance_to(t.max(clock.now_ms()));
                        bus.pump(clock.now_ms());
                        sim.step(clock.now_ms());
                        let p = sim.valve("ctrl-1", 1).unwrap().position;
                        prop_assert!((0.0..=100.0).contains(&p));
                    }
                    _ => break,
                }
            }
            clock.advance_to(until);
            Ok(())
        };
        for (i, (step, gap)) in cmds.into_iter().enumerate() {
            run(&mut sim, &mut bus, clock.now_ms() + gap)?;
            last = f64::from(step) * 25.0;
            let payload = encode(&CmdPayload { value: last, ts: clock.now_ms(), token: format!("c{i}") });
            bus.publish(Envelope::new(cmd_topic("ctrl-1", 1), payload, Qos::AtLeastOnce, clock.now_ms()).retained()).unwrap();
        }
        run(&mut sim, &mut bus, clock.now_ms() + 10_000)?;
        prop_assert_eq!(sim.valve("ctrl-1", 1).unwrap().position, last);
    }
}

const TOGGLE: &str = r#"
[sim]
seed = 5

[[devices]]
id = "ctrl-1"
channels = [{ kind = "valve", io = 1 }]

[[actuators]]
system_id = "V1"
kind = "valve"
device = "ctrl-1"
io = 1

[[resources]]
id = "line"
actuators = ["V1"]
lockout = [{ system_id = "V1", value = 0 }]

[[operations]]
op_id = "open"
resources = ["line"]
priority = 2
steps = [
  { kind = "group", members = [{ system_id = "V1", value = 100 }] },
  { kind = "delay", duration_ms = 1000 },
]
idle_restore = [{ system_id = "V1", value = 0 }]

[[operations]]
op_id = "pause"
resources = ["line"]
priority = 1
steps = [{ kind = "delay", duration_ms = 2000 }]

[[routines]]
routine_id = "toggle"
states = ["a", "b"]
initial = "a"
owned_ops = ["open", "pause"]
fault_policy = "hold"
transitions = [
  { from = "a", trigger = "external(go)", op = "open", to = "b" },
  { from = "b", trigger = "@elapsed >= 1", op = "pause", to = "a" },
]
"#;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn routine_has_at_most_one_pending_op(triggers in prop::collection::vec((0u64..120_000, prop::bool::ANY), 1..30)) {
        let cfg = PlantConfig::parse(TOGGLE).unwrap();
        prop_assert_eq!(cfg.validate(), vec![]);
        let mut s = Scenario::default();
        for (at, fault) in triggers {
            s.push(at, Action::Trigger { name: "go".into() });
            if fault {
                s.push(at + 500, Action::Fault { op: "open".into() });
                s.push(at + 4_000, Action::Clear { resource: "line".into() });
            }
        }
        let mut w = World::new(&cfg, EventLog::in_memory()).unwrap();
        w.load_scenario(&s);
        w.run_until(140_000).unwrap();
        let mut pending = false;
        for r in w.controller().log().records().iter().filter(|r| r.layer == Layer::Routine) {
            match r.kind.as_str() {
                "dispatch" => {
                    prop_assert!(!pending, "second dispatch at {} while one is pending", r.ts);
                    pending = true;
                }
                "transition" | "halt" | "hold" => pending = false,
                _ => {}
            }
        }
    }
}
