//! Append-only event log shared by every layer, plus the latency analysis
//! run over it.
//!
//! Records are newline-delimited JSON documents. A file sink writes them from
//! a dedicated thread fed by a bounded channel; when the channel is full the
//! producer parks records in a local overflow buffer instead of blocking.

pub mod analysis;

use std::collections::{BTreeMap, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, SyncSender, TrySendError};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Bus,
    Actuator,
    Group,
    Interlock,
    Operation,
    Routine,
    Sim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub ts: u64,
    pub layer: Layer,
    pub kind: String,
    pub subject: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub token: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attrs: BTreeMap<String, Value>,
}

impl EventRecord {
    pub fn new(ts: u64, layer: Layer, kind: &str, subject: &str) -> Self {
        Self {
            ts,
            layer,
            kind: kind.to_string(),
            subject: subject.to_string(),
            token: String::new(),
            attrs: BTreeMap::new(),
        }
    }

    pub fn token(mut self, token: &str) -> Self {
        self.token = token.to_string();
        self
    }

    pub fn attr(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.attrs.insert(key.to_string(), value.into());
        self
    }

    pub fn attr_u64(&self, key: &str) -> Option<u64> {
        self.attrs.get(key).and_then(Value::as_u64)
    }

    pub fn attr_f64(&self, key: &str) -> Option<f64> {
        self.attrs.get(key).and_then(Value::as_f64)
    }

    pub fn attr_str(&self, key: &str) -> Option<&str> {
        self.attrs.get(key).and_then(Value::as_str)
    }

    /// Copy with `ts` and every `*_ts` attribute made relative to `origin`.
    pub fn rebased(&self, origin: u64) -> EventRecord {
        let mut r = self.clone();
        r.ts = r.ts.saturating_sub(origin);
        for (k, v) in r.attrs.iter_mut() {
            if let (true, Some(t)) = (k.ends_with("_ts"), v.as_u64()) {
                *v = Value::from(t.saturating_sub(origin));
            }
        }
        r
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("records serialize")
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("record at {ts} precedes last {layer:?} record at {last}")]
    OutOfOrder { layer: Layer, ts: u64, last: u64 },
    #[error("log io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt log line {line}: {msg}")]
    Corrupt { line: usize, msg: String },
}

const CHANNEL_BOUND: usize = 8192;

struct FileSink {
    tx: Option<SyncSender<String>>,
    overflow: VecDeque<String>,
    worker: Option<JoinHandle<std::io::Result<()>>>,
    path: PathBuf,
}

impl FileSink {
    fn open(path: &Path) -> Result<Self, LogError> {
        let file = File::create(path)?;
        let (tx, rx) = sync_channel::<String>(CHANNEL_BOUND);
        let worker = std::thread::spawn(move || {
            let mut out = BufWriter::new(file);
            for line in rx {
                if let Err(e) = writeln!(out, "{line}") {
                    tracing::warn!(error = %e, "event log write failed");
                    return Err(e);
                }
            }
            out.flush()
        });
        Ok(Self {
            tx: Some(tx),
            overflow: VecDeque::new(),
            worker: Some(worker),
            path: path.to_path_buf(),
        })
    }

    fn push(&mut self, line: String) {
        self.overflow.push_back(line);
        let Some(tx) = &self.tx else { return };
        while let Some(line) = self.overflow.pop_front() {
            match tx.try_send(line) {
                Ok(()) => {}
                Err(TrySendError::Full(line)) => {
                    self.overflow.push_front(line);
                    break;
                }
                Err(TrySendError::Disconnected(_)) => {
                    tracing::warn!(path = %self.path.display(), "event log writer stopped; records dropped");
                    self.overflow.clear();
                    self.tx = None;
                    break;
                }
            }
        }
    }

    fn finish(&mut self) -> Result<(), LogError> {
        if let Some(tx) = self.tx.take() {
            for line in self.overflow.drain(..) {
                if tx.send(line).is_err() {
                    break;
                }
            }
        }
        if let Some(worker) = self.worker.take() {
            match worker.join() {
                Ok(res) => res?,
                Err(_) => return Err(LogError::Malformed("log writer panicked".into())),
            }
        }
        Ok(())
    }
}

/// Event log with an optional in-memory copy and an optional file sink.
pub struct EventLog {
    memory: Option<Vec<EventRecord>>,
    file: Option<FileSink>,
    last_ts: BTreeMap<Layer, u64>,
    count: u64,
}

impl EventLog {
    pub fn in_memory() -> Self {
        Self {
            memory: Some(Vec::new()),
            file: None,
            last_ts: BTreeMap::new(),
            count: 0,
        }
    }

    pub fn discard() -> Self {
        Self {
            memory: None,
            file: None,
            last_ts: BTreeMap::new(),
            count: 0,
        }
    }

    pub fn to_file(path: &Path, keep_in_memory: bool) -> Result<Self, LogError> {
        Ok(Self {
            memory: keep_in_memory.then(Vec::new),
            file: Some(FileSink::open(path)?),
            last_ts: BTreeMap::new(),
            count: 0,
        })
    }

    /// Appends a record. Within a layer timestamps must not go backwards.
    pub fn record(&mut self, ev: EventRecord) -> Result<(), LogError> {
        if ev.kind.is_empty() {
            return Err(LogError::Malformed("empty kind".into()));
        }
        if ev.subject.is_empty() {
            return Err(LogError::Malformed("empty subject".into()));
        }
        let last = self.last_ts.entry(ev.layer).or_insert(0);
        if ev.ts < *last {
            return Err(LogError::OutOfOrder {
                layer: ev.layer,
                ts: ev.ts,
                last: *last,
            });
        }
        *last = ev.ts;
        self.count += 1;
        if let Some(file) = &mut self.file {
            file.push(ev.to_line());
        }
        if let Some(mem) = &mut self.memory {
            mem.push(ev);
        }
        Ok(())
    }

    pub fn records(&self) -> &[EventRecord] {
        self.memory.as_deref().unwrap_or(&[])
    }

    pub fn take_records(&mut self) -> Vec<EventRecord> {
        self.memory.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn len(&self) -> u64 {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Flushes and closes the file sink.
    pub fn finish(&mut self) -> Result<(), LogError> {
        match &mut self.file {
            Some(f) => f.finish(),
            None => Ok(()),
        }
    }
}

impl Drop for EventLog {
    fn drop(&mut self) {
        let _ = self.finish();
    }
}

/// Reads a log file back, one record per line.
pub fn read_log(path: &Path) -> Result<Vec<EventRecord>, LogError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| LogError::Corrupt {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}
