//! Runs a loaded scenario and turns the outcome into a report.
//!
//! Event-time scenarios run in the simulated runtime, processing-time ones
//! in real time over loopback TCP, either as threads of this process or as
//! one child process per node.

use std::io;
use std::path::Path;
use std::time::Duration;

use atmosphere_core::cep::ClockMode;

use crate::config::{RunSettings, Scenario};
use crate::live::{run_live, LiveSettings};
use crate::report::{Parts, RunReport};
use crate::schedule::build_schedule;
use crate::sim::{run_sim, SimSettings};
use crate::topology::{build_nodes, BuildError};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error("{0}")]
    Unsupported(&'static str),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("node {node}: {message}")]
    Node { node: String, message: String },
}

pub fn live_settings(r: &RunSettings) -> LiveSettings {
    LiveSettings {
        end: Duration::from_secs_f64(r.duration_s),
        drain: Duration::from_secs_f64(r.drain_s),
        high_water: r.high_water,
        saturation: Duration::from_secs_f64(r.saturation_s),
        cpu_interval: Duration::from_millis(r.cpu_interval_ms),
        connect_timeout: Duration::from_secs(10),
    }
}

pub fn sim_settings(r: &RunSettings) -> SimSettings {
    SimSettings {
        latency_ms: r.link_latency_ms,
        end_ms: (r.duration_s * 1000.0) as u64,
        drain_ms: (r.drain_s * 1000.0) as u64,
    }
}

/// Runs every node inside this process.
pub fn run(s: &Scenario) -> Result<RunReport, RunError> {
    let nodes = build_nodes(s)?;
    let schedule = build_schedule(s);
    let (runtime, outcome) = match s.run.clock {
        ClockMode::EventTime => ("sim", run_sim(nodes, &schedule, sim_settings(&s.run))),
        ClockMode::ProcessingTime => ("threads", run_live(nodes, &schedule, live_settings(&s.run))?),
    };
    Ok(RunReport::build(s, runtime, Parts::from_outcome(outcome)))
}

/// Runs one child process per node. `exe` is the `atmosphere` binary and
/// `scenario_path` the file `s` was loaded from; per-node results go under
/// `work`.
pub fn run_in_processes(s: &Scenario, scenario_path: &Path, exe: &Path, work: &Path) -> Result<RunReport, RunError> {
    if s.run.clock != ClockMode::ProcessingTime {
        return Err(RunError::Unsupported(
            "separate processes need processing_time; event_time runs are simulated in one process",
        ));
    }
    let parts = crate::process::run_children(s, scenario_path, exe, work)?;
    Ok(RunReport::build(s, "processes", parts))
}
