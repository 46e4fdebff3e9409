use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::sync::Arc;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::topic::{validate_topic, TopicFilter};
use super::wire::device_of;
use super::{BusError, DelayModel, Envelope, Handler, PublishAck, Qos, SubscriptionId, Transport};
use crate::clock::Clock;

/// Link behaviour of the in-process broker.
#[derive(Debug, Clone, Default)]
pub struct LoopbackConfig {
    /// Delay for `dev/<device>/...` traffic without a per-device override.
    pub default_delay: DelayModel,
    /// Per-device link delay, applied in both directions.
    pub link_delays: BTreeMap<String, DelayModel>,
    /// Drop probability for at-most-once deliveries.
    pub qos0_loss: f64,
    /// Duplicate probability for at-least-once deliveries.
    pub qos1_duplicate: f64,
    pub seed: u64,
}

struct Subscription {
    filter: TopicFilter,
    session: Option<String>,
    handler: Arc<Mutex<Handler>>,
}

#[derive(Debug, PartialEq, Eq, PartialOrd, Ord)]
struct PendingKey {
    at: u64,
    seq: u64,
}

struct Inner {
    config: LoopbackConfig,
    available: bool,
    subs: BTreeMap<SubscriptionId, Subscription>,
    next_sub: u64,
    retained: BTreeMap<String, Envelope>,
    queue: BinaryHeap<Reverse<PendingKey>>,
    pending: HashMap<u64, (SubscriptionId, Envelope)>,
    fifo_tail: HashMap<(SubscriptionId, String), u64>,
    sessions: BTreeMap<String, Option<Envelope>>,
    rng: ChaCha8Rng,
    seq: u64,
}

impl Inner {
    fn delay_for(&mut self, topic: &str) -> u64 {
        let model = match device_of(topic) {
            Some(dev) => *self.config.link_delays.get(dev).unwrap_or(&self.config.default_delay),
            None => return 0,
        };
        model.sample(&mut self.rng)
    }

    fn schedule(&mut self, now: u64, sub: SubscriptionId, env: Envelope) {
        let delay = self.delay_for(&env.topic);
        let tail = self.fifo_tail.entry((sub, env.topic.clone())).or_insert(0);
        let at = (now + delay).max(*tail);
        *tail = at;
        self.seq += 1;
        let seq = self.seq;
        self.queue.push(Reverse(PendingKey { at, seq }));
        self.pending.insert(seq, (sub, env));
    }

    fn route(&mut self, now: u64, env: &Envelope) -> usize {
        let targets: Vec<SubscriptionId> = self
            .subs
            .iter()
            .filter(|(_, s)| s.filter.matches(&env.topic))
            .map(|(id, _)| *id)
            .collect();
        let mut live = env.clone();
        live.retain = false;
        for &sub in &targets {
            let copies = match env.qos {
                Qos::AtMostOnce if self.config.qos0_loss > 0.0 && self.rng.random_bool(self.config.qos0_loss.min(1.0)) => 0,
                Qos::AtLeastOnce if self.config.qos1_duplicate > 0.0 && self.rng.random_bool(self.config.qos1_duplicate.min(1.0)) => 2,
                _ => 1,
            };
            for _ in 0..copies {
                self.schedule(now, sub, live.clone());
            }
        }
        targets.len()
    }

    fn publish(&mut self, now: u64, env: Envelope) -> Result<PublishAck, BusError> {
        if !self.available {
            return Err(BusError::TransportDown);
        }
        validate_topic(&env.topic)?;
        env.payload_str()?;
        if env.retain {
            if env.payload.is_empty() {
                self.retained.remove(&env.topic);
            } else {
                self.retained.insert(env.topic.clone(), env.clone());
            }
        }
        let routed = self.route(now, &env);
        Ok(PublishAck { routed })
    }

    fn add_sub(&mut self, now: u64, session: Option<&str>, pattern: &str, handler: Handler) -> Result<SubscriptionId, BusError> {
        if !self.available {
            return Err(BusError::TransportDown);
        }
        let filter = TopicFilter::parse(pattern)?;
        if let Some(dev) = session {
            if !self.sessions.contains_key(dev) {
                return Err(BusError::NoSession(dev.to_string()));
            }
        }
        self.next_sub += 1;
        let id = SubscriptionId(self.next_sub);
        let replay: Vec<Envelope> = self
            .retained
            .values()
            .filter(|e| filter.matches(&e.topic))
            .cloned()
            .collect();
        self.subs.insert(
            id,
            Subscription {
                filter,
                session: session.map(str::to_string),
                handler: Arc::new(Mutex::new(handler)),
            },
        );
        for env in replay {
            self.schedule(now, id, env);
        }
        Ok(id)
    }

    fn remove_sub(&mut self, id: SubscriptionId) {
        self.subs.remove(&id);
        self.fifo_tail.retain(|(sub, _), _| *sub != id);
    }
}

/// In-process broker with scheduled, delayed delivery. Cloning yields another
/// handle to the same broker.
#[derive(Clone)]
pub struct LoopbackBus {
    clock: Arc<dyn Clock>,
    inner: Arc<Mutex<Inner>>,
}

impl LoopbackBus {
    pub fn new(clock: Arc<dyn Clock>, config: LoopbackConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self {
            clock,
            inner: Arc::new(Mutex::new(Inner {
                config,
                available: true,
                subs: BTreeMap::new(),
                next_sub: 0,
                retained: BTreeMap::new(),
                queue: BinaryHeap::new(),
                pending: HashMap::new(),
                fifo_tail: HashMap::new(),
                sessions: BTreeMap::new(),
                rng,
                seq: 0,
            })),
        }
    }

    /// Simulates the broker being stopped (`false`) or restarted.
    pub fn set_available(&self, up: bool) {
        self.inner.lock().available = up;
    }

    pub fn retained(&self, topic: &str) -> Option<Envelope> {
        self.inner.lock().retained.get(topic).cloned()
    }

    pub fn has_session(&self, device: &str) -> bool {
        self.inner.lock().sessions.contains_key(device)
    }

    pub fn pending_len(&self) -> usize {
        self.inner.lock().pending.len()
    }

    pub fn set_link_delay(&self, device: &str, model: DelayModel) {
        self.inner.lock().config.link_delays.insert(device.to_string(), model);
    }
}

impl Transport for LoopbackBus {
    fn publish(&mut self, env: Envelope) -> Result<PublishAck, BusError> {
        let now = self.clock.now_ms();
        self.inner.lock().publish(now, env)
    }

    fn subscribe(&mut self, pattern: &str, handler: Handler) -> Result<SubscriptionId, BusError> {
        let now = self.clock.now_ms();
        self.inner.lock().add_sub(now, None, pattern, handler)
    }

    fn subscribe_as(&mut self, session: &str, pattern: &str, handler: Handler) -> Result<SubscriptionId, BusError> {
        let now = self.clock.now_ms();
        self.inner.lock().add_sub(now, Some(session), pattern, handler)
    }

    fn unsubscribe(&mut self, id: SubscriptionId) {
        self.inner.lock().remove_sub(id);
    }

    fn open_session(&mut self, device: &str) -> Result<(), BusError> {
        let mut inner = self.inner.lock();
        if !inner.available {
            return Err(BusError::TransportDown);
        }
        inner.sessions.entry(device.to_string()).or_insert(None);
        Ok(())
    }

    fn register_last_will(&mut self, device: &str, env: Envelope) -> Result<(), BusError> {
        let mut inner = self.inner.lock();
        if !inner.available {
            return Err(BusError::TransportDown);
        }
        validate_topic(&env.topic)?;
        match inner.sessions.get_mut(device) {
            Some(will) => {
                *will = Some(env);
                Ok(())
            }
            None => Err(BusError::NoSession(device.to_string())),
        }
    }

    fn close_session(&mut self, device: &str, graceful: bool) -> Result<(), BusError> {
        let now = self.clock.now_ms();
        let mut inner = self.inner.lock();
        let will = match inner.sessions.remove(device) {
            Some(will) => will,
            None => return Err(BusError::NoSession(device.to_string())),
        };
        let owned: Vec<SubscriptionId> = inner
            .subs
            .iter()
            .filter(|(_, s)| s.session.as_deref() == Some(device))
            .map(|(id, _)| *id)
            .collect();
        for id in owned {
            inner.remove_sub(id);
        }
        if !graceful {
            if let Some(mut env) = will {
                env.source_ts = now;
                // The broker publishes the will even though the client is gone.
                let was = inner.available;
                inner.available = true;
                let res = inner.publish(now, env);
                inner.available = was;
                res?;
            }
        }
        Ok(())
    }

    fn pump(&mut self, now_ms: u64) -> usize {
        let mut delivered = 0;
        loop {
            let next = {
                let mut inner = self.inner.lock();
                match inner.queue.peek() {
                    Some(Reverse(key)) if key.at <= now_ms => {}
                    _ => break,
                }
                let Reverse(key) = inner.queue.pop().expect("peeked");
                let (sub, env) = inner.pending.remove(&key.seq).expect("pending entry");
                inner.subs.get(&sub).map(|s| (Arc::clone(&s.handler), env))
            };
            if let Some((handler, mut env)) = next {
                env.recv_ts = Some(self.clock.now_ms());
                (handler.lock())(&env);
                delivered += 1;
            }
        }
        delivered
    }

    fn next_due(&self) -> Option<u64> {
        self.inner.lock().queue.peek().map(|Reverse(k)| k.at)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bus::wire::{encode, status_topic, CmdPayload, STATUS_OFFLINE};
    use crate::bus::Inbox;
    use crate::clock::SimClock;

    fn bus(delay: DelayModel) -> (SimClock, LoopbackBus) {
        let clock = SimClock::new(10_000);
        let bus = LoopbackBus::new(
            Arc::new(clock.clone()),
            LoopbackConfig {
                default_delay: delay,
                ..Default::default()
            },
        );
        (clock, bus)
    }

    fn cmd(ts: u64) -> Envelope {
        let payload = encode(&CmdPayload {
            value: 100.0,
            ts,
            token: "t".into(),
        });
        Envelope::new("dev/ctrl-1/io/3/cmd", payload, Qos::AtLeastOnce, ts)
    }

    #[test]
    fn publish_reaches_wildcard_subscriber() {
        let (clock, mut bus) = bus(DelayModel::default());
        let inbox = Inbox::new();
        bus.subscribe("dev/ctrl-1/#", inbox.handler()).unwrap();
        let ack = bus.publish(cmd(clock.now_ms())).unwrap();
        assert_eq!(ack.routed, 1);
        bus.pump(clock.now_ms());
        let got = inbox.drain();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].tof_ms(), Some(0));
    }

    #[test]
    fn retained_reaches_late_subscriber() {
        let (clock, mut bus) = bus(DelayModel::default());
        bus.publish(cmd(clock.now_ms()).retained()).unwrap();
        let inbox = Inbox::new();
        bus.subscribe("dev/+/io/+/cmd", inbox.handler()).unwrap();
        bus.pump(clock.now_ms());
        let got = inbox.drain();
        assert_eq!(got.len(), 1);
        assert!(got[0].retain);
    }

    #[test]
    fn broker_down_surfaces_error() {
        let (clock, mut bus) = bus(DelayModel::default());
        bus.set_available(false);
        assert_eq!(bus.publish(cmd(clock.now_ms())), Err(BusError::TransportDown));
    }

    #[test]
    fn fan_out_and_unsubscribe() {
        let (clock, mut bus) = bus(DelayModel::default());
        let a = Inbox::new();
        let b = Inbox::new();
        let sub_a = bus.subscribe("dev/ctrl-1/io/3/cmd", a.handler()).unwrap();
        bus.subscribe("dev/ctrl-1/io/3/cmd", b.handler()).unwrap();
        bus.publish(cmd(clock.now_ms())).unwrap();
        bus.pump(clock.now_ms());
        assert_eq!((a.len(), b.len()), (1, 1));
        bus.unsubscribe(sub_a);
        bus.publish(cmd(clock.now_ms())).unwrap();
        bus.pump(clock.now_ms());
        assert_eq!((a.len(), b.len()), (1, 2));
    }

    #[test]
    fn invalid_pattern_rejected() {
        let (_, mut bus) = bus(DelayModel::default());
        assert!(matches!(
            bus.subscribe("dev/#/x", Inbox::new().handler()),
            Err(BusError::InvalidPattern(_))
        ));
    }

    #[test]
    fn delayed_delivery_stamps_recv_ts() {
        let (clock, mut bus) = bus(DelayModel::Constant { ms: 100.0 });
        let inbox = Inbox::new();
        bus.subscribe("#", inbox.handler()).unwrap();
        bus.publish(cmd(clock.now_ms())).unwrap();
        assert_eq!(bus.pump(clock.now_ms()), 0);
        assert_eq!(bus.next_due(), Some(10_100));
        clock.advance_to(10_100);
        bus.pump(clock.now_ms());
        assert_eq!(inbox.drain()[0].tof_ms(), Some(100));
    }

    #[test]
    fn last_will_only_on_ungraceful_drop() {
        let (clock, mut bus) = bus(DelayModel::default());
        let status = Inbox::new();
        bus.subscribe("dev/+/status", status.handler()).unwrap();
        for (graceful, expected) in [(true, 0), (false, 1)] {
            bus.open_session("ctrl-2").unwrap();
            let will = Envelope::new(status_topic("ctrl-2"), STATUS_OFFLINE, Qos::AtLeastOnce, 0).retained();
            bus.register_last_will("ctrl-2", will).unwrap();
            bus.close_session("ctrl-2", graceful).unwrap();
            bus.pump(clock.now_ms());
            let got = status.drain();
            assert_eq!(got.len(), expected);
        }
        assert_eq!(bus.retained("dev/ctrl-2/status").unwrap().payload, b"offline");
    }

    #[test]
    fn session_subscriptions_vanish_with_session() {
        let (clock, mut bus) = bus(DelayModel::default());
        bus.open_session("ctrl-1").unwrap();
        let inbox = Inbox::new();
        bus.subscribe_as("ctrl-1", "dev/ctrl-1/io/+/cmd", inbox.handler()).unwrap();
        bus.close_session("ctrl-1", false).unwrap();
        bus.publish(cmd(clock.now_ms())).unwrap();
        bus.pump(clock.now_ms());
        assert!(inbox.is_empty());
        assert!(matches!(
            bus.subscribe_as("ctrl-1", "x", Inbox::new().handler()),
            Err(BusError::NoSession(_))
        ));
    }
}
