//! Topic scheme and payload documents exchanged with devices.
//!
//! ```text
//! dev/<device>/io/<n>/state   {"value": <number>, "ts": <epoch-ms>}
//! dev/<device>/io/<n>/cmd     {"value": <number>, "ts": <epoch-ms>, "token": <string>}
//! dev/<device>/telemetry      {"uptime_s": <number>, "rssi": <number>, "ts": <epoch-ms>}
//! dev/<device>/status         online | offline   (retained, last will)
//! sys/ctl/<verb>              <target>
//! sys/notify                  structured diagnostic document
//! ```

use serde::{Deserialize, Serialize, Serializer};

use super::BusError;

pub const STATUS_ONLINE: &str = "online";
pub const STATUS_OFFLINE: &str = "offline";
pub const NOTIFY_TOPIC: &str = "sys/notify";
pub const CONTROL_PREFIX: &str = "sys/ctl/";

pub fn state_topic(device: &str, io: u32) -> String {
    format!("dev/{device}/io/{io}/state")
}

pub fn cmd_topic(device: &str, io: u32) -> String {
    format!("dev/{device}/io/{io}/cmd")
}

pub fn telemetry_topic(device: &str) -> String {
    format!("dev/{device}/telemetry")
}

pub fn status_topic(device: &str) -> String {
    format!("dev/{device}/status")
}

pub fn control_topic(verb: &str) -> String {
    format!("{CONTROL_PREFIX}{verb}")
}

/// Classification of a topic under the scheme above.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TopicKind<'a> {
    State { device: &'a str, io: u32 },
    Cmd { device: &'a str, io: u32 },
    Telemetry { device: &'a str },
    Status { device: &'a str },
    Control { verb: &'a str },
    Notify,
    Other,
}

pub fn classify(topic: &str) -> TopicKind<'_> {
    if topic == NOTIFY_TOPIC {
        return TopicKind::Notify;
    }
    if let Some(verb) = topic.strip_prefix(CONTROL_PREFIX) {
        if !verb.is_empty() && !verb.contains('/') {
            return TopicKind::Control { verb };
        }
        return TopicKind::Other;
    }
    let parts: Vec<&str> = topic.split('/').collect();
    match parts.as_slice() {
        ["dev", device, "io", n, leaf] => match (n.parse::<u32>(), *leaf) {
            (Ok(io), "state") => TopicKind::State { device, io },
            (Ok(io), "cmd") => TopicKind::Cmd { device, io },
            _ => TopicKind::Other,
        },
        ["dev", device, "telemetry"] => TopicKind::Telemetry { device },
        ["dev", device, "status"] => TopicKind::Status { device },
        _ => TopicKind::Other,
    }
}

/// The device id embedded in a `dev/<device>/...` topic.
pub fn device_of(topic: &str) -> Option<&str> {
    let rest = topic.strip_prefix("dev/")?;
    rest.split('/').next().filter(|d| !d.is_empty())
}

/// Integral values go on the wire without a fractional part (`100`, not `100.0`).
fn serialize_number<S: Serializer>(value: &f64, s: S) -> Result<S::Ok, S::Error> {
    if value.fract() == 0.0 && value.abs() < 9.0e15 {
        s.serialize_i64(*value as i64)
    } else {
        s.serialize_f64(*value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatePayload {
    #[serde(serialize_with = "serialize_number")]
    pub value: f64,
    pub ts: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmdPayload {
    #[serde(serialize_with = "serialize_number")]
    pub value: f64,
    pub ts: u64,
    pub token: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryPayload {
    pub uptime_s: u64,
    #[serde(serialize_with = "serialize_number")]
    pub rssi: f64,
    pub ts: u64,
}

pub fn encode<T: Serialize>(payload: &T) -> Vec<u8> {
    serde_json::to_vec(payload).expect("wire payloads always serialize")
}

pub fn decode<'a, T: Deserialize<'a>>(topic: &str, bytes: &'a [u8]) -> Result<T, BusError> {
    serde_json::from_slice(bytes).map_err(|_| BusError::InvalidPayload(topic.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_payload_is_bit_exact() {
        let bytes = encode(&CmdPayload {
            value: 100.0,
            ts: 1_700_000_000_123,
            token: "tok-1".into(),
        });
        assert_eq!(
            std::str::from_utf8(&bytes).unwrap(),
            r#"{"value":100,"ts":1700000000123,"token":"tok-1"}"#
        );
        let state = encode(&StatePayload { value: 98.7, ts: 5 });
        assert_eq!(std::str::from_utf8(&state).unwrap(), r#"{"value":98.7,"ts":5}"#);
    }

    #[test]
    fn classifies_scheme_topics() {
        assert_eq!(classify("dev/ctrl-1/io/7/cmd"), TopicKind::Cmd { device: "ctrl-1", io: 7 });
        assert_eq!(
            classify("dev/station-2/io/1/state"),
            TopicKind::State { device: "station-2", io: 1 }
        );
        assert_eq!(classify("dev/ctrl-2/status"), TopicKind::Status { device: "ctrl-2" });
        assert_eq!(classify("dev/ctrl-2/telemetry"), TopicKind::Telemetry { device: "ctrl-2" });
        assert_eq!(classify("sys/ctl/fault"), TopicKind::Control { verb: "fault" });
        assert_eq!(classify("dev/ctrl-2/io/x/state"), TopicKind::Other);
        assert_eq!(device_of("dev/ctrl-3/io/1/cmd"), Some("ctrl-3"));
        assert_eq!(device_of("sys/notify"), None);
    }

    #[test]
    fn decodes_payloads() {
        let p: StatePayload = decode("t", br#"{"value":50,"ts":10}"#).unwrap();
        assert_eq!(p.value, 50.0);
        assert!(decode::<StatePayload>("t", b"nope").is_err());
    }
}
