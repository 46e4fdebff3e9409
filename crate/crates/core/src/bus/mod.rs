//! Publish/subscribe transport carrying all device and server traffic.
//!
//! The [`Transport`] trait has two backends: [`LoopbackBus`], an in-process
//! broker with configurable link delays for deterministic simulation, and
//! (with the `mqtt` feature) a client for an external MQTT 3.1.1 broker.

mod delay;
mod loopback;
#[cfg(feature = "mqtt")]
mod mqtt;
pub mod topic;
pub mod wire;

use std::collections::VecDeque;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use delay::DelayModel;
pub use loopback::{LoopbackBus, LoopbackConfig};
#[cfg(feature = "mqtt")]
pub use mqtt::MqttTransport;
pub use topic::TopicFilter;

/// MQTT delivery class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Qos {
    AtMostOnce,
    AtLeastOnce,
}

/// A timestamped pub/sub message.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub topic: String,
    pub payload: Vec<u8>,
    pub qos: Qos,
    pub retain: bool,
    /// Epoch ms at the publisher.
    pub source_ts: u64,
    /// Epoch ms at the receiver, stamped on delivery.
    pub recv_ts: Option<u64>,
}

impl Envelope {
    pub fn new(topic: impl Into<String>, payload: impl Into<Vec<u8>>, qos: Qos, source_ts: u64) -> Self {
        Self {
            topic: topic.into(),
            payload: payload.into(),
            qos,
            retain: false,
            source_ts,
            recv_ts: None,
        }
    }

    pub fn retained(mut self) -> Self {
        self.retain = true;
        self
    }

    pub fn payload_str(&self) -> Result<&str, BusError> {
        std::str::from_utf8(&self.payload).map_err(|_| BusError::InvalidPayload(self.topic.clone()))
    }

    /// Time of flight in ms, if the envelope has been delivered.
    pub fn tof_ms(&self) -> Option<i64> {
        self.recv_ts.map(|r| r as i64 - self.source_ts as i64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SubscriptionId(pub u64);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BusError {
    #[error("transport is down")]
    TransportDown,
    #[error("invalid topic {0:?}")]
    InvalidTopic(String),
    #[error("invalid topic filter {0:?}")]
    InvalidPattern(String),
    #[error("payload on {0:?} is not a UTF-8 document")]
    InvalidPayload(String),
    #[error("no open session for device {0:?}")]
    NoSession(String),
    #[error("broker error: {0}")]
    Broker(String),
}

/// Callback invoked once per matching envelope. Deliveries to one handler are serialized.
pub type Handler = Box<dyn FnMut(&Envelope) + Send>;

/// Acknowledgement returned by a successful publish.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PublishAck {
    /// Number of subscriptions the envelope was routed to.
    pub routed: usize,
}

/// Device↔server message transport.
///
/// Sessions model MQTT client connections: subscriptions made with a session
/// belong to it and vanish when it drops, and an ungraceful drop publishes the
/// registered last will.
pub trait Transport: Send {
    fn publish(&mut self, env: Envelope) -> Result<PublishAck, BusError>;

    fn subscribe(&mut self, pattern: &str, handler: Handler) -> Result<SubscriptionId, BusError>;

    /// Subscribes on behalf of a device session.
    fn subscribe_as(&mut self, session: &str, pattern: &str, handler: Handler) -> Result<SubscriptionId, BusError>;

    fn unsubscribe(&mut self, id: SubscriptionId);

    fn open_session(&mut self, device: &str) -> Result<(), BusError>;

    fn register_last_will(&mut self, device: &str, env: Envelope) -> Result<(), BusError>;

    /// Closes a device session. `graceful = false` triggers the last will.
    fn close_session(&mut self, device: &str, graceful: bool) -> Result<(), BusError>;

    /// Delivers everything due at or before `now_ms`. No-op for backends that
    /// deliver asynchronously.
    fn pump(&mut self, now_ms: u64) -> usize;

    /// Earliest pending delivery time, if the backend schedules deliveries.
    fn next_due(&self) -> Option<u64>;
}

/// Shared FIFO that a handler can push into; the owner drains it from its own loop.
#[derive(Debug, Clone, Default)]
pub struct Inbox {
    queue: Arc<Mutex<VecDeque<Envelope>>>,
}

impl Inbox {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn handler(&self) -> Handler {
        let queue = Arc::clone(&self.queue);
        Box::new(move |env: &Envelope| queue.lock().push_back(env.clone()))
    }

    pub fn drain(&self) -> Vec<Envelope> {
        self.queue.lock().drain(..).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.lock().is_empty()
    }

    pub fn len(&self) -> usize {
        self.queue.lock().len()
    }
}
