//! Event-driven process automation control plane.
//!
//! Layers, bottom up: [`bus`] transport, [`actuator`] abstraction, [`group`]
//! commands, [`interlock`], [`operation`] engine and [`routine`] state
//! machines. [`sim`] provides a simulated device fleet speaking the same wire
//! contract as the field gateways, and [`metrics`] the event log and latency
//! analysis.

pub mod bus;
pub mod clock;
pub mod config;
pub mod actuator;
pub mod condition;
pub mod group;
pub mod interlock;
pub mod metrics;
pub mod operation;
pub mod plane;
pub mod routine;
pub mod runtime;
pub mod scenario;
pub mod sim;
