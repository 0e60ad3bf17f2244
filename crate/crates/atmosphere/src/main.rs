use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use atmosphere::config::{load_scenario, Mode, Scenario};
use atmosphere::harness::{self, RunError};
use atmosphere::process::{node_main, NodeArgs};
use atmosphere::report::RunReport;
use atmosphere::runtime::event_json;
use atmosphere_core::cep::{oracle_replay, ClockMode, Emission, Engine};
use atmosphere_core::event::{decode_event, NodeId};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(name = "atmosphere", version, about = "Edge/fog/cloud scenario runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Clock {
    Event,
    Processing,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write latency.csv, cpu.csv, summary.json and the logs.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Events per second for every simulator.
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long, value_parser = clap::value_parser!(u8).range(0..=1))]
        qos: Option<u8>,
        /// Seconds during which inputs are sent.
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long, value_enum)]
        clock: Option<Clock>,
        #[arg(long)]
        seed: Option<u64>,
        /// Seconds at the start left out of latency figures.
        #[arg(long)]
        warmup: Option<f64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// One process per node instead of one thread per node.
        #[arg(long)]
        processes: bool,
    },
    /// Load and check a scenario without running it.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Replay an event log through a node's patterns, with both the engine
    /// and the reference implementation, and print the emissions.
    Oracle {
        #[arg(long)]
        scenario: PathBuf,
        /// One JSON event per line.
        #[arg(long)]
        log: PathBuf,
        /// Fog or cloud node whose patterns to use; the first fog by default.
        #[arg(long)]
        node: Option<String>,
        /// Fire windows up to this time; the last event time by default.
        #[arg(long)]
        horizon: Option<u64>,
    },
    /// Run a single node of a multi-process run.
    #[command(hide = true)]
    Node {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        settings: PathBuf,
        #[arg(long)]
        ports: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(path: &Path) -> Result<Scenario> {
    load_scenario(path).with_context(|| format!("loading {}", path.display()))
}

fn print_summary(r: &RunReport, out: &Path) {
    let s = &r.summary;
    println!(
        "{} [{} {} qos{} {}]: {} of {} round trips, {} lost, {} in flight",
        s.scenario, s.runtime, s.mode, s.qos, s.clock, s.completed, s.initiated, s.lost, s.in_flight
    );
    if let (Some(mean), Some(b)) = (s.mean_latency_ms, s.buckets) {
        println!(
            "latency mean {mean:.2} ms; <=5 {:.2}% 6-10 {:.2}% 11-50 {:.2}% 51-100 {:.2}% >100 {:.2}%",
            b.le_5, b.le_10, b.le_50, b.le_100, b.over_100
        );
        println!("sustained {:.1}/s", s.sustained_rate);
    }
    println!(
        "packets publish {} puback {} acl {}; {} alerts, {} emissions",
        s.packets.publish,
        s.packets.puback,
        s.packets.acl,
        r.alerts.len(),
        r.emissions.len()
    );
    if s.saturated {
        println!("SATURATED: input queues stayed above the high-water mark");
    }
    if s.timed_out {
        println!("TIMED OUT: {} round trips still in flight", s.in_flight);
    }
    println!("written to {}", out.display());
}

fn emission_line(e: &Emission) -> String {
    json!({
        "pattern": e.produced_by,
        "target": e.target.map(|t| format!("{t:?}").to_lowercase()),
        "event": event_json(&e.event),
    })
    .to_string()
}

fn oracle(scenario: &Path, log: &Path, node: Option<String>, horizon: Option<u64>) -> Result<bool> {
    let s = load(scenario)?;
    let (id, patterns) = match &node {
        None => {
            let f = s.fogs.first().context("scenario has no fog node")?;
            (f.id.clone(), f.patterns.clone())
        }
        Some(n) => match (s.fog(n), s.clouds.iter().find(|c| &c.id == n)) {
            (Some(f), _) => (f.id.clone(), f.patterns.clone()),
            (None, Some(c)) => (c.id.clone(), c.patterns.clone()),
            _ => bail!("no fog or cloud node {n}"),
        },
    };
    let text = fs::read_to_string(log).with_context(|| format!("reading {}", log.display()))?;
    let mut events = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let e = decode_event(line.as_bytes(), &s.schemas).with_context(|| format!("line {}", i + 1))?;
        events.push(e);
    }
    let horizon = horizon.unwrap_or_else(|| events.iter().map(|e| e.timestamp).max().unwrap_or(0));
    let source = NodeId::new(&id);
    let expected = oracle_replay(&s.schemas, &patterns, &events, 0, horizon, &source)?;
    let mut engine = Engine::new(s.schemas.clone(), ClockMode::EventTime, 0).with_source(source);
    engine.deploy_all(patterns)?;
    let actual = engine.replay(&events, horizon)?;
    for e in &expected {
        println!("{}", emission_line(e));
    }
    if expected == actual {
        eprintln!("{} emissions; engine agrees", expected.len());
        return Ok(true);
    }
    let first = expected
        .iter()
        .zip(&actual)
        .position(|(a, b)| a != b)
        .unwrap_or(expected.len().min(actual.len()));
    eprintln!(
        "engine disagrees: reference {} emissions, engine {}; first difference at {first}",
        expected.len(),
        actual.len()
    );
    if let Some(e) = actual.get(first) {
        eprintln!("engine: {}", emission_line(e));
    }
    Ok(false)
}

fn main() -> Result<ExitCode> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run {
            scenario,
            rate,
            qos,
            duration,
            mode,
            clock,
            seed,
            warmup,
            out,
            processes,
        } => {
            let s = load(&scenario)?;
            let mut run = s.run.clone();
            run.rate = rate.or(run.rate);
            run.qos = qos.unwrap_or(run.qos);
            run.duration_s = duration.unwrap_or(run.duration_s);
            run.mode = mode.unwrap_or(run.mode);
            run.seed = seed.unwrap_or(run.seed);
            run.warmup_s = warmup.unwrap_or(run.warmup_s);
            if let Some(c) = clock {
                run.clock = match c {
                    Clock::Event => ClockMode::EventTime,
                    Clock::Processing => ClockMode::ProcessingTime,
                };
            }
            let s = s.with_run(run)?;
            let report = if processes {
                let exe = std::env::current_exe()?;
                harness::run_in_processes(&s, &scenario, &exe, &out.join("work"))
            } else {
                harness::run(&s)
            };
            let report = match report {
                Ok(r) => r,
                Err(e @ RunError::Unsupported(_)) => bail!(e),
                Err(e) => return Err(e).context("run failed"),
            };
            report.write(&out)?;
            print_summary(&report, &out);
            Ok(if report.summary.saturated {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            })
        }
        Command::Validate { scenario } => {
            let s = load(&scenario)?;
            println!(
                "{}: {} fog, {} cloud, {} edge, {} user nodes; {} simulators, {} timeline entries",
                s.name,
                s.fogs.len(),
                s.clouds.len(),
                s.edges.len(),
                s.users.len(),
                s.simulators.len(),
                s.timeline.len()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Oracle {
            scenario,
            log,
            node,
            horizon,
        } => Ok(if oracle(&scenario, &log, node, horizon)? {
            ExitCode::SUCCESS
        } else {
            ExitCode::FAILURE
        }),
        Command::Node {
            scenario,
            settings,
            ports,
            id,
            out,
        } => {
            node_main(&NodeArgs {
                scenario,
                settings,
                ports,
                id,
                out,
            })?;
            Ok(ExitCode::SUCCESS)
        }
    }
}
