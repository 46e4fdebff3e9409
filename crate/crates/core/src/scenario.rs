//! Scenario scripts: timed actions applied to a running plant.
//!
//! ```toml
//! end_ms = 600000
//!
//! [[events]]
//! at_ms = 5000
//! action = "run_operation"
//! op = "fill_red"
//! ```
//!
//! `at_ms` is relative to the start of the run. Events with the same `at_ms`
//! apply in file order.

use std::path::Path;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::bus::DelayModel;
use crate::config::{parse_toml, ConfigError};
use crate::sim::Signal;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    SetLinkState { device: String, online: bool },
    SetLinkDelay { device: String, delay: DelayModel },
    InjectStuckValve { device: String, io: u32 },
    InjectDeadFeedback { device: String, io: u32 },
    ClearChannelFault { device: String, io: u32 },
    SetSensorTrace { device: String, io: u32, signal: Signal },
    RunOperation { op: String },
    Fault { op: String },
    Clear { resource: String },
    Activate { routine: String },
    Deactivate { routine: String },
    Trigger { name: String },
}

impl Action {
    /// Control verb and target for actions that go through the control topic.
    pub fn control(&self) -> Option<(&'static str, &str)> {
        Some(match self {
            Action::RunOperation { op } => ("run", op),
            Action::Fault { op } => ("fault", op),
            Action::Clear { resource } => ("clear", resource),
            Action::Activate { routine } => ("activate", routine),
            Action::Deactivate { routine } => ("deactivate", routine),
            Action::Trigger { name } => ("trigger", name),
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ScenarioEvent {
    pub at_ms: u64,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Default run length when no `--until` is given.
    #[serde(default)]
    pub end_ms: Option<u64>,
    #[serde(default)]
    pub events: Vec<ScenarioEvent>,
}

impl Scenario {
    pub fn parse(src: &str) -> Result<Self, ConfigError> {
        let mut s: Scenario = parse_toml(src)?;
        s.events.sort_by_key(|e| e.at_ms);
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let src = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&src)
    }

    pub fn push(&mut self, at_ms: u64, action: Action) -> &mut Self {
        let at = self.events.partition_point(|e| e.at_ms <= at_ms);
        self.events.insert(at, ScenarioEvent { at_ms, action });
        self
    }
}

pub fn schema() -> serde_json::Value {
    serde_json::to_value(schemars::schema_for!(Scenario)).expect("schema serializes")
}
