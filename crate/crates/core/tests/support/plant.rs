use std::path::PathBuf;

use plantctl::config::PlantConfig;
use plantctl::metrics::{EventLog, EventRecord, Layer};
use plantctl::runtime::World;
use plantctl::scenario::Scenario;

pub fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn reference_text() -> String {
    std::fs::read_to_string(root().join("configs/reference-plant.toml")).expect("reference plant")
}

/// Reference plant plus extra tables appended, routines switched off.
pub fn quiet_plant(extra: &str) -> PlantConfig {
    let mut cfg = PlantConfig::parse(&format!("{}\n{extra}", reference_text())).expect("parse");
    for r in &mut cfg.routines {
        r.active = false;
    }
    let v = cfg.validate();
    assert!(v.is_empty(), "{v:?}");
    cfg
}

pub fn demo_scenario() -> Scenario {
    Scenario::load(&root().join("configs/demo-scenario.toml")).expect("demo scenario")
}

pub fn world(cfg: &PlantConfig, scenario: &Scenario) -> World {
    let mut w = World::new(cfg, EventLog::in_memory()).expect("boot");
    w.load_scenario(scenario);
    w
}

pub fn find<'a>(recs: &'a [EventRecord], layer: Layer, kind: &'a str) -> impl Iterator<Item = &'a EventRecord> + 'a {
    recs.iter().filter(move |r| r.layer == layer && r.kind == kind)
}

/// Short operations on every line: open two valves and the pump, hold, restore.
pub fn cycle_ops() -> String {
    let mut out = String::new();
    for (i, line) in ["red", "blue", "green", "yellow", "purple"].iter().enumerate() {
        out.push_str(&format!(
            r#"
[[operations]]
op_id = "cycle_{line}"
resources = ["{line}"]
priority = {p}
steps = [
  {{ kind = "group", members = [{{ system_id = "{line}.V08", value = 100 }}, {{ system_id = "{line}.V09", value = 100 }}, {{ system_id = "{line}.P", value = 1 }}] }},
  {{ kind = "delay", duration_ms = 2000 }},
]
"#,
            p = 500 + i
        ));
    }
    out
}
