use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use plantctl::config::{self, ConfigError, PlantConfig};
use plantctl::metrics::analysis::{
    compute_command_metrics, compute_op_runtime, compute_tof, format_commands, format_runtime, format_tof, summary_csv, CommandFilter,
};
use plantctl::metrics::{read_log, EventLog};
use plantctl::runtime::World;
use plantctl::scenario::{self, Scenario};

const DEFAULT_UNTIL_S: u64 = 600;
const DEFAULT_LOG: &str = "plant-events.jsonl";

#[derive(Parser)]
#[command(name = "plantctl", version, about = "Process automation control plane")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check a plant configuration and list every violation.
    Validate { file: PathBuf },
    /// Boot the plant and run it, optionally driven by a scenario script.
    Run {
        file: PathBuf,
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Simulated seconds to run; defaults to the scenario's end_ms, else 600.
        #[arg(long)]
        until: Option<f64>,
        /// Event log path; overrides the config.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Summarise an event log.
    Report {
        log: PathBuf,
        metric: Metric,
        #[arg(long)]
        csv: bool,
        /// Include partial-travel and pump commands in motion/completion.
        #[arg(long)]
        all_commands: bool,
    },
    /// Send a control verb to a running instance over its control topic.
    Inject {
        verb: Verb,
        target: String,
        /// Config whose broker url to use.
        #[arg(long, conflicts_with = "broker")]
        config: Option<PathBuf>,
        #[arg(long)]
        broker: Option<String>,
    },
    /// Print the JSON schema of a document type.
    Schema { document: Document },
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Tof,
    Motion,
    Completion,
    FaultLockout,
    OpRuntime,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum Verb {
    Run,
    Fault,
    Clear,
    Activate,
    Deactivate,
    Trigger,
    Disconnect,
    Reconnect,
}

impl Verb {
    fn as_str(self) -> &'static str {
        match self {
            Verb::Run => "run",
            Verb::Fault => "fault",
            Verb::Clear => "clear",
            Verb::Activate => "activate",
            Verb::Deactivate => "deactivate",
            Verb::Trigger => "trigger",
            Verb::Disconnect => "disconnect",
            Verb::Reconnect => "reconnect",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Document {
    Config,
    Scenario,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Validate { file } => validate(&file),
        Cmd::Run { file, scenario, until, log } => run(&file, scenario.as_deref(), until, log),
        Cmd::Report { log, metric, csv, all_commands } => report(&log, metric, csv, all_commands),
        Cmd::Inject { verb, target, config, broker } => inject(verb, &target, config.as_deref(), broker),
        Cmd::Schema { document } => {
            let schema = match document {
                Document::Config => config::schema(),
                Document::Scenario => scenario::schema(),
            };
            println!("{}", serde_json::to_string_pretty(&schema).expect("schema serializes"));
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn load(file: &Path) -> Result<PlantConfig, String> {
    match PlantConfig::load(file) {
        Ok(cfg) => {
            let violations = cfg.validate();
            if violations.is_empty() {
                Ok(cfg)
            } else {
                Err(describe(file, &ConfigError::Invalid(violations)))
            }
        }
        Err(e) => Err(describe(file, &e)),
    }
}

fn describe(file: &Path, e: &ConfigError) -> String {
    match e {
        ConfigError::Invalid(vs) => {
            let mut out = format!("{}: {} violation(s)", file.display(), vs.len());
            for v in vs {
                out.push_str(&format!("\n  {v}"));
            }
            out
        }
        other => format!("{}: {other}", file.display()),
    }
}

fn validate(file: &Path) -> Result<(), String> {
    let cfg = load(file)?;
    println!(
        "{}: ok ({} devices, {} actuators, {} sensors, {} resources, {} operations, {} routines)",
        file.display(),
        cfg.devices.len(),
        cfg.actuators.len(),
        cfg.sensors.len(),
        cfg.resources.len(),
        cfg.operations.len(),
        cfg.routines.len()
    );
    Ok(())
}

fn run(file: &Path, scenario: Option<&Path>, until: Option<f64>, log: Option<PathBuf>) -> Result<(), String> {
    let cfg = load(file)?;
    let scenario = match scenario {
        Some(p) => Scenario::load(p).map_err(|e| format!("scenario {}: {e}", p.display()))?,
        None => Scenario::default(),
    };
    let until_ms = match until {
        Some(s) if s.is_finite() && s >= 0.0 => (s * 1000.0).round() as u64,
        Some(s) => return Err(format!("--until must be a non-negative number of seconds, got {s}")),
        None => scenario.end_ms.unwrap_or(DEFAULT_UNTIL_S * 1000),
    };
    let log_path = log.or_else(|| cfg.log.path.clone()).unwrap_or_else(|| PathBuf::from(DEFAULT_LOG));
    let events = EventLog::to_file(&log_path, false).map_err(|e| format!("event log {}: {e}", log_path.display()))?;

    if !cfg.is_loopback() {
        return run_external(&cfg, &scenario, events, until_ms, &log_path);
    }
    let mut world = World::new(&cfg, events).map_err(|e| format!("boot: {e}"))?;
    world.load_scenario(&scenario);
    world.run_until(until_ms).map_err(|e| format!("run: {e}"))?;
    let history = world.controller().history().to_vec();
    let log = world.finish().map_err(|e| format!("flush: {e}"))?;
    let faulted = history.iter().filter(|f| f.outcome != plantctl::operation::RunOutcome::Done).count();
    println!(
        "simulated {:.1} s: {} operation runs ({} faulted), {} log records -> {}",
        until_ms as f64 / 1000.0,
        history.len(),
        faulted,
        log.len(),
        log_path.display()
    );
    Ok(())
}

#[cfg(feature = "mqtt")]
fn run_external(cfg: &PlantConfig, scenario: &Scenario, events: EventLog, until_ms: u64, log_path: &Path) -> Result<(), String> {
    let log = plantctl::runtime::realtime::run(cfg, scenario, events, Some(std::time::Duration::from_millis(until_ms)))
        .map_err(|e| format!("run: {e}"))?;
    println!("ran {:.1} s against {}: {} log records -> {}", until_ms as f64 / 1000.0, cfg.broker.url, log.len(), log_path.display());
    Ok(())
}

#[cfg(not(feature = "mqtt"))]
fn run_external(cfg: &PlantConfig, _: &Scenario, _: EventLog, _: u64, _: &Path) -> Result<(), String> {
    Err(format!("broker {} needs a build with the `mqtt` feature", cfg.broker.url))
}

fn report(path: &Path, metric: Metric, csv: bool, all_commands: bool) -> Result<(), String> {
    let records = read_log(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let filter = if all_commands {
        CommandFilter::default()
    } else {
        CommandFilter { full_sweep_only: true, valves_only: true }
    };
    let mut text = String::new();
    let mut rows: Vec<(String, plantctl::metrics::analysis::Summary)> = Vec::new();
    if matches!(metric, Metric::Tof | Metric::All) {
        let r = compute_tof(&records).map_err(|e| e.to_string())?;
        text.push_str(&format_tof(&r));
        rows.extend(r.per_device.iter().map(|(d, s)| (format!("tof:{d}"), s.clone())));
        rows.push(("tof".into(), r.overall.clone()));
    }
    let which: &[&str] = match metric {
        Metric::Motion => &["motion"],
        Metric::Completion => &["completion"],
        Metric::FaultLockout => &["fault-lockout"],
        Metric::All => &["motion", "completion", "fault-lockout"],
        _ => &[],
    };
    if !which.is_empty() {
        let r = compute_command_metrics(&records, filter).map_err(|e| e.to_string())?;
        text.push_str(&format_commands(&r, which));
        for (name, s) in [("motion", &r.issuance_to_motion), ("completion", &r.completion), ("fault-lockout", &r.fault_lockout)] {
            if let (true, Some(s)) = (which.contains(&name), s) {
                rows.push((name.into(), s.clone()));
            }
        }
    }
    if matches!(metric, Metric::OpRuntime | Metric::All) {
        let r = compute_op_runtime(&records).map_err(|e| e.to_string())?;
        text.push_str(&format_runtime(&r));
        rows.extend(r.per_op.iter().map(|(op, s)| (format!("runtime:{op}"), s.clone())));
    }
    if csv {
        let refs: Vec<(&str, &plantctl::metrics::analysis::Summary)> = rows.iter().map(|(n, s)| (n.as_str(), s)).collect();
        print!("{}", summary_csv(&refs));
    } else {
        print!("{text}");
    }
    Ok(())
}

#[cfg(feature = "mqtt")]
fn inject(verb: Verb, target: &str, config: Option<&Path>, broker: Option<String>) -> Result<(), String> {
    use std::sync::Arc;

    use plantctl::bus::{MqttTransport, Transport};
    use plantctl::clock::{Clock, SystemClock};

    let url = broker_url(config, broker)?;
    let clock: Arc<dyn Clock> = Arc::new(SystemClock::new());
    let mut t = MqttTransport::connect(&url, "plantctl-inject", Arc::clone(&clock)).map_err(|e| format!("{url}: {e}"))?;
    t.publish(plantctl::runtime::control_envelope(verb.as_str(), target, clock.now_ms()))
        .map_err(|e| format!("{url}: {e}"))?;
    println!("sent {} {target} via {url}", verb.as_str());
    Ok(())
}

#[cfg(not(feature = "mqtt"))]
fn inject(verb: Verb, target: &str, config: Option<&Path>, broker: Option<String>) -> Result<(), String> {
    let url = broker_url(config, broker)?;
    Err(format!(
        "cannot send {} {target} to {url}: this build has no broker client (enable the `mqtt` feature); \
         loopback instances take controls from scenario files",
        verb.as_str()
    ))
}

fn broker_url(config: Option<&Path>, broker: Option<String>) -> Result<String, String> {
    let url = match (broker, config) {
        (Some(url), _) => url,
        (None, Some(path)) => PlantConfig::load(path).map_err(|e| describe(path, &e))?.broker.url,
        (None, None) => return Err("inject needs --broker <url> or --config <file>".into()),
    };
    if url.starts_with("loopback") {
        return Err(format!("{url} is in-process only; scenario files are the control surface for loopback runs"));
    }
    Ok(url)
}
