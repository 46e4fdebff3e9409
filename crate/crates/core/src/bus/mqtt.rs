//! External broker backend over MQTT 3.1.1 (`rumqttc`).
//!
//! Every session (the server plus one per simulated device) is its own client
//! connection, so last wills behave as on real hardware. Deliveries happen on
//! the connection threads; handlers are expected to push into an [`Inbox`].
//!
//! Source timestamps come from the publisher's clock; no skew correction is
//! done, so time of flight against a real broker includes clock offset.
//!
//! [`Inbox`]: super::Inbox

use std::collections::BTreeMap;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::Mutex;
use rumqttc::{Client, Connection, Event, LastWill, MqttOptions, Packet, QoS};

use super::topic::{validate_topic, TopicFilter};
use super::{BusError, Envelope, Handler, PublishAck, Qos, SubscriptionId, Transport};
use crate::clock::Clock;

const SERVER_SESSION: &str = "";

struct SubEntry {
    filter: TopicFilter,
    session: String,
    handler: Arc<Mutex<Handler>>,
}

type SubTable = Arc<Mutex<BTreeMap<SubscriptionId, SubEntry>>>;

struct Session {
    client: Client,
    worker: Option<JoinHandle<()>>,
}

pub struct MqttTransport {
    host: String,
    port: u16,
    client_prefix: String,
    clock: Arc<dyn Clock>,
    sessions: BTreeMap<String, Session>,
    subs: SubTable,
    next_sub: u64,
}

fn to_qos(q: Qos) -> QoS {
    match q {
        Qos::AtMostOnce => QoS::AtMostOnce,
        Qos::AtLeastOnce => QoS::AtLeastOnce,
    }
}

/// Parses `mqtt://host[:port]` or `tcp://host[:port]`.
pub fn parse_broker_url(url: &str) -> Result<(String, u16), BusError> {
    let rest = url
        .strip_prefix("mqtt://")
        .or_else(|| url.strip_prefix("tcp://"))
        .ok_or_else(|| BusError::Broker(format!("unsupported broker url {url:?}")))?;
    let rest = rest.trim_end_matches('/');
    match rest.rsplit_once(':') {
        Some((host, port)) => {
            let port = port.parse().map_err(|_| BusError::Broker(format!("bad port in {url:?}")))?;
            Ok((host.to_string(), port))
        }
        None => Ok((rest.to_string(), 1883)),
    }
}

fn source_ts_of(payload: &[u8], fallback: u64) -> u64 {
    serde_json::from_slice::<serde_json::Value>(payload)
        .ok()
        .and_then(|v| v.get("ts").and_then(|t| t.as_u64()))
        .unwrap_or(fallback)
}

fn spawn_worker(mut conn: Connection, session: String, subs: SubTable, clock: Arc<dyn Clock>) -> JoinHandle<()> {
    std::thread::spawn(move || {
        for event in conn.iter() {
            match event {
                Ok(Event::Incoming(Packet::Publish(p))) => {
                    let now = clock.now_ms();
                    let env = Envelope {
                        topic: p.topic.clone(),
                        source_ts: source_ts_of(&p.payload, now),
                        payload: p.payload.to_vec(),
                        qos: if p.qos == QoS::AtMostOnce { Qos::AtMostOnce } else { Qos::AtLeastOnce },
                        retain: p.retain,
                        recv_ts: Some(now),
                    };
                    let handlers: Vec<_> = subs
                        .lock()
                        .values()
                        .filter(|s| s.session == session && s.filter.matches(&env.topic))
                        .map(|s| Arc::clone(&s.handler))
                        .collect();
                    for h in handlers {
                        (h.lock())(&env);
                    }
                }
                Ok(Event::Outgoing(rumqttc::Outgoing::Disconnect)) => break,
                Ok(_) => {}
                Err(e) => {
                    tracing::warn!(session = %session, error = %e, "mqtt connection error");
                    std::thread::sleep(Duration::from_millis(500));
                }
            }
        }
    })
}

impl MqttTransport {
    pub fn connect(url: &str, client_prefix: &str, clock: Arc<dyn Clock>) -> Result<Self, BusError> {
        let (host, port) = parse_broker_url(url)?;
        let mut t = Self {
            host,
            port,
            client_prefix: client_prefix.to_string(),
            clock,
            sessions: BTreeMap::new(),
            subs: Arc::new(Mutex::new(BTreeMap::new())),
            next_sub: 0,
        };
        t.start_session(SERVER_SESSION, None);
        Ok(t)
    }

    fn start_session(&mut self, name: &str, will: Option<&Envelope>) {
        let id = if name.is_empty() {
            format!("{}-server", self.client_prefix)
        } else {
            format!("{}-{}", self.client_prefix, name)
        };
        let mut opts = MqttOptions::new(id, self.host.clone(), self.port);
        opts.set_keep_alive(Duration::from_secs(5));
        if let Some(w) = will {
            opts.set_last_will(LastWill::new(w.topic.clone(), w.payload.clone(), to_qos(w.qos), w.retain));
        }
        let (client, conn) = Client::new(opts, 256);
        let worker = spawn_worker(conn, name.to_string(), Arc::clone(&self.subs), Arc::clone(&self.clock));
        self.sessions.insert(
            name.to_string(),
            Session {
                client,
                worker: Some(worker),
            },
        );
    }

    fn client(&self, session: &str) -> Result<&Client, BusError> {
        self.sessions
            .get(session)
            .map(|s| &s.client)
            .ok_or_else(|| BusError::NoSession(session.to_string()))
    }

    fn add_sub(&mut self, session: &str, pattern: &str, handler: Handler) -> Result<SubscriptionId, BusError> {
        let filter = TopicFilter::parse(pattern)?;
        self.client(session)?
            .subscribe(pattern, QoS::AtLeastOnce)
            .map_err(|_| BusError::TransportDown)?;
        self.next_sub += 1;
        let id = SubscriptionId(self.next_sub);
        self.subs.lock().insert(
            id,
            SubEntry {
                filter,
                session: session.to_string(),
                handler: Arc::new(Mutex::new(handler)),
            },
        );
        Ok(id)
    }
}

impl Transport for MqttTransport {
    fn publish(&mut self, env: Envelope) -> Result<PublishAck, BusError> {
        validate_topic(&env.topic)?;
        env.payload_str()?;
        self.client(SERVER_SESSION)?
            .publish(env.topic.clone(), to_qos(env.qos), env.retain, env.payload)
            .map_err(|_| BusError::TransportDown)?;
        Ok(PublishAck { routed: 0 })
    }

    fn subscribe(&mut self, pattern: &str, handler: Handler) -> Result<SubscriptionId, BusError> {
        self.add_sub(SERVER_SESSION, pattern, handler)
    }

    fn subscribe_as(&mut self, session: &str, pattern: &str, handler: Handler) -> Result<SubscriptionId, BusError> {
        self.add_sub(session, pattern, handler)
    }

    fn unsubscribe(&mut self, id: SubscriptionId) {
        if let Some(entry) = self.subs.lock().remove(&id) {
            if let Some(s) = self.sessions.get(&entry.session) {
                let _ = s.client.unsubscribe(entry.filter.as_str());
            }
        }
    }

    fn open_session(&mut self, device: &str) -> Result<(), BusError> {
        if !self.sessions.contains_key(device) {
            self.start_session(device, None);
        }
        Ok(())
    }

    fn register_last_will(&mut self, device: &str, env: Envelope) -> Result<(), BusError> {
        // The will is part of CONNECT, so the session reconnects carrying it.
        let mut old = self.sessions.remove(device).ok_or_else(|| BusError::NoSession(device.to_string()))?;
        let _ = old.client.disconnect();
        if let Some(w) = old.worker.take() {
            let _ = w.join();
        }
        self.start_session(device, Some(&env));
        Ok(())
    }

    fn close_session(&mut self, device: &str, graceful: bool) -> Result<(), BusError> {
        let mut session = self.sessions.remove(device).ok_or_else(|| BusError::NoSession(device.to_string()))?;
        self.subs.lock().retain(|_, s| s.session != device);
        if graceful {
            let _ = session.client.disconnect();
            if let Some(w) = session.worker.take() {
                let _ = w.join();
            }
        }
        // Ungraceful: dropping the client closes the socket without DISCONNECT,
        // so the broker publishes the will.
        Ok(())
    }

    fn pump(&mut self, _now_ms: u64) -> usize {
        0
    }

    fn next_due(&self) -> Option<u64> {
        None
    }
}
