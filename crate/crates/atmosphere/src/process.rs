//! One process per node.
//!
//! The parent picks the fog ports, starts children in startup order and
//! talks to each over its standard streams: the child prints `ready` once
//! its links are up, starts its share of the schedule on `go`, prints
//! `done` when that share is over and exits on `stop`, leaving its results
//! in a JSON file.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use atmosphere_core::event::NodeRole;
use atmosphere_core::node::LinkKind;
use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError};
use log::warn;

use crate::config::{load_scenario, RunSettings, Scenario};
use crate::cpu::CpuSampler;
use crate::harness::{live_settings, RunError};
use crate::live::{dial_all, drive, mqtt_dials, node_loop, spawn_acceptor, wake, Clock, FogAddrs, Msg, Progress};
use crate::report::Parts;
use crate::runtime::{Outcome, Stamped};
use crate::schedule::build_schedule;
use crate::sim::FIRST_INBOUND;
use crate::topology::build_nodes;

/// Arguments of the `node` subcommand.
#[derive(Debug, Clone)]
pub struct NodeArgs {
    pub scenario: PathBuf,
    pub settings: PathBuf,
    pub ports: PathBuf,
    pub id: String,
    pub out: PathBuf,
}

struct ChildProc {
    id: String,
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<String>,
    out: PathBuf,
}

impl ChildProc {
    fn expect(&self, word: &str, timeout: Duration) -> Result<(), RunError> {
        let fail = |message: String| RunError::Node {
            node: self.id.clone(),
            message,
        };
        match self.lines.recv_timeout(timeout) {
            Ok(l) if l == word => Ok(()),
            Ok(l) => Err(fail(format!("expected {word:?}, got {l:?}"))),
            Err(RecvTimeoutError::Timeout) => Err(fail(format!("no {word:?} within {timeout:?}"))),
            Err(RecvTimeoutError::Disconnected) => Err(fail("exited early".into())),
        }
    }

    fn say(&mut self, word: &str) {
        // A child that already exited shows up when it is waited for.
        let _ = writeln!(self.stdin, "{word}");
        let _ = self.stdin.flush();
    }
}

fn free_port_pair() -> io::Result<FogAddrs> {
    let m = TcpListener::bind("127.0.0.1:0")?;
    let g = TcpListener::bind("127.0.0.1:0")?;
    Ok(FogAddrs {
        mqtt: m.local_addr()?,
        gateway: g.local_addr()?,
    })
}

fn wait_exit(c: &mut Child, timeout: Duration) -> io::Result<bool> {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if let Some(status) = c.try_wait()? {
            return Ok(status.success());
        }
        thread::sleep(Duration::from_millis(20));
    }
    c.kill()?;
    c.wait()?;
    Ok(false)
}

fn spawn_child(exe: &Path, args: &NodeArgs) -> io::Result<ChildProc> {
    let mut child = Command::new(exe)
        .arg("node")
        .arg("--scenario")
        .arg(&args.scenario)
        .arg("--settings")
        .arg(&args.settings)
        .arg("--ports")
        .arg(&args.ports)
        .arg("--id")
        .arg(&args.id)
        .arg("--out")
        .arg(&args.out)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()?;
    let stdin = child.stdin.take().expect("piped stdin");
    let stdout = child.stdout.take().expect("piped stdout");
    let (tx, rx) = unbounded();
    thread::spawn(move || {
        for line in BufReader::new(stdout).lines() {
            let Ok(line) = line else { break };
            if tx.send(line.trim().to_string()).is_err() {
                break;
            }
        }
    });
    Ok(ChildProc {
        id: args.id.clone(),
        child,
        stdin,
        lines: rx,
        out: args.out.clone(),
    })
}

/// Parent side: starts the children, runs them and merges their results in
/// startup order.
pub fn run_children(s: &Scenario, scenario_path: &Path, exe: &Path, work: &Path) -> Result<Parts, RunError> {
    let nodes_dir = work.join("nodes");
    fs::create_dir_all(&nodes_dir)?;
    let settings = work.join("run.json");
    fs::write(&settings, serde_json::to_vec_pretty(&s.run).map_err(io::Error::other)?)?;
    let mut ports = BTreeMap::new();
    for f in &s.fogs {
        ports.insert(f.id.clone(), free_port_pair()?);
    }
    let ports_path = work.join("ports.json");
    fs::write(
        &ports_path,
        serde_json::to_vec_pretty(&ports).map_err(io::Error::other)?,
    )?;

    let startup = Duration::from_secs(20);
    let mut children: Vec<ChildProc> = Vec::new();
    let result = (|| {
        for (id, _) in s.node_ids() {
            let args = NodeArgs {
                scenario: scenario_path.to_path_buf(),
                settings: settings.clone(),
                ports: ports_path.clone(),
                id: id.to_string(),
                out: nodes_dir.join(format!("{id}.json")),
            };
            let c = spawn_child(exe, &args)?;
            children.push(c);
            children.last().expect("just pushed").expect("ready", startup)?;
        }
        for c in &mut children {
            c.say("go");
        }
        let run = &s.run;
        let limit = Duration::from_secs_f64(run.duration_s + run.drain_s) + Duration::from_secs(10);
        let deadline = Instant::now() + limit;
        for c in &children {
            c.expect("done", deadline.saturating_duration_since(Instant::now()))?;
        }
        Ok::<(), RunError>(())
    })();

    for c in children.iter_mut().rev() {
        c.say("stop");
        if !wait_exit(&mut c.child, Duration::from_secs(10))? {
            warn!("node {} did not exit cleanly", c.id);
        }
    }
    result?;

    let mut merged = Parts::default();
    for c in &children {
        let text = fs::read(&c.out).map_err(|e| RunError::Node {
            node: c.id.clone(),
            message: format!("{}: {e}", c.out.display()),
        })?;
        let part: Parts = serde_json::from_slice(&text).map_err(|e| RunError::Node {
            node: c.id.clone(),
            message: e.to_string(),
        })?;
        merged.merge(part);
    }
    Ok(merged)
}

fn read_line(input: &mut impl BufRead) -> io::Result<String> {
    let mut l = String::new();
    input.read_line(&mut l)?;
    Ok(l.trim().to_string())
}

/// Child side: runs one node until told to stop.
pub fn node_main(args: &NodeArgs) -> Result<(), RunError> {
    let scenario = load_scenario(&args.scenario).map_err(|e| RunError::Node {
        node: args.id.clone(),
        message: e.to_string(),
    })?;
    let run: RunSettings = serde_json::from_slice(&fs::read(&args.settings)?).map_err(io::Error::other)?;
    let scenario = scenario.with_run(run).map_err(|e| RunError::Node {
        node: args.id.clone(),
        message: e.to_string(),
    })?;
    let addrs: BTreeMap<String, FogAddrs> =
        serde_json::from_slice(&fs::read(&args.ports)?).map_err(io::Error::other)?;
    let node = build_nodes(&scenario)?
        .into_iter()
        .find(|n| n.id().as_str() == args.id)
        .ok_or_else(|| RunError::Node {
            node: args.id.clone(),
            message: "not in the scenario".into(),
        })?;
    let settings = live_settings(&scenario.run);
    let clock = Clock::new();
    let (tx, rx) = unbounded::<Msg>();
    let (rec_tx, rec_rx) = unbounded::<Stamped>();
    let (stat_tx, stat_rx) = unbounded();

    let stop = Arc::new(AtomicBool::new(false));
    let mut acceptors = Vec::new();
    let own = (node.role() == NodeRole::Fog).then(|| addrs[&args.id]);
    if let Some(a) = own {
        let next = Arc::new(AtomicU64::new(FIRST_INBOUND));
        let m = TcpListener::bind(a.mqtt)?;
        let g = TcpListener::bind(a.gateway)?;
        acceptors.push(spawn_acceptor(
            m,
            LinkKind::Mqtt,
            tx.clone(),
            next.clone(),
            stop.clone(),
        ));
        acceptors.push(spawn_acceptor(g, LinkKind::Gateway, tx.clone(), next, stop.clone()));
    }
    let expected: BTreeMap<String, _> = [(args.id.clone(), mqtt_dials(node.as_ref()))]
        .into_iter()
        .filter(|(_, d)| !d.is_empty())
        .collect();
    let (writers, connections) = dial_all(node.as_ref(), &addrs, &tx, settings.connect_timeout)?;
    let handle = thread::spawn(move || node_loop(node, rx, writers, rec_tx, clock, Some(stat_tx)));

    let mut progress = Progress::default();
    progress.await_sessions(&expected, &rec_rx, settings.connect_timeout)?;
    let mut cpu = CpuSampler::new(settings.cpu_interval);
    if let Ok((id, path)) = stat_rx.recv_timeout(Duration::from_secs(1)) {
        cpu.watch(id, path);
    }

    let mut stdout = io::stdout();
    let mut stdin = io::stdin().lock();
    writeln!(stdout, "ready")?;
    stdout.flush()?;
    let word = read_line(&mut stdin)?;
    let mut stimuli_sent = 0;
    let mut saturated = false;
    let go = clock.us();
    if word == "go" {
        let schedule: Vec<_> = build_schedule(&scenario)
            .into_iter()
            .filter(|st| st.node == args.id)
            .collect();
        let txs = BTreeMap::from([(args.id.clone(), tx.clone())]);
        (stimuli_sent, saturated) = drive(&schedule, &txs, clock, go, &settings, &rec_rx, &mut progress, &mut cpu);
        writeln!(stdout, "done")?;
        stdout.flush()?;
        // Anything other than "stop", including end of input, also stops.
        let _ = read_line(&mut stdin);
    }
    let elapsed_us = clock.us() - go;

    let _ = tx.send(Msg::Stop);
    let summary = handle.join().map_err(|_| RunError::Node {
        node: args.id.clone(),
        message: "node thread panicked".into(),
    })?;
    stop.store(true, Ordering::SeqCst);
    if let Some(a) = own {
        wake(a.mqtt);
        wake(a.gateway);
    }
    for a in acceptors {
        let _ = a.join();
    }
    for s in rec_rx.try_iter() {
        progress.take(s);
    }
    let mut records = progress.records;
    for r in &mut records {
        r.t_us = r.t_us.saturating_sub(go);
    }
    let parts = Parts::from_outcome(Outcome {
        records,
        nodes: vec![summary],
        cpu: cpu.finish(),
        connections,
        stimuli_sent,
        saturated,
        elapsed_us,
    });
    fs::write(&args.out, serde_json::to_vec(&parts).map_err(io::Error::other)?)?;
    Ok(())
}
