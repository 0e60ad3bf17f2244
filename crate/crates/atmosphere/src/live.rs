//! Real-time runtime: one thread per node, TCP on the loopback interface
//! between them.
//!
//! Each fog listens on two ports, one for broker sessions and one for the
//! agent gateway. Dialing nodes connect at startup; a reader thread per
//! socket turns bytes into node inputs. Node threads write to their sockets
//! directly, so a slow peer shows up as a growing input queue at the
//! sender's side.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use atmosphere_core::agent::FrameDecoder;
use atmosphere_core::mqtt::decode_packet;
use atmosphere_core::node::{GatewayFrame, LinkId, LinkKind, Node, NodeInput, NodeOutput, Record};
use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use log::{debug, warn};

use crate::cpu::CpuSampler;
use crate::runtime::{wire_bytes, Connection, NodeSummary, Outcome, Stamped};
use crate::schedule::Stimulus;
use crate::sim::FIRST_INBOUND;

#[derive(Debug, Clone, Copy)]
pub struct LiveSettings {
    /// No stimulus is sent at or after this offset.
    pub end: Duration,
    /// Time allowed after `end` for outstanding round trips.
    pub drain: Duration,
    pub high_water: usize,
    pub saturation: Duration,
    pub cpu_interval: Duration,
    pub connect_timeout: Duration,
}

pub enum Msg {
    Input(NodeInput),
    Attach(LinkId, LinkKind, TcpStream),
    Stop,
}

/// Listening addresses of a fog node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FogAddrs {
    pub mqtt: SocketAddr,
    pub gateway: SocketAddr,
}

/// Microsecond clock shared by the threads of one process.
#[derive(Debug, Clone, Copy)]
pub struct Clock(Instant);

impl Clock {
    pub fn new() -> Self {
        Clock(Instant::now())
    }

    pub fn us(&self) -> u64 {
        self.0.elapsed().as_micros() as u64
    }

    pub fn ms(&self) -> u64 {
        self.us() / 1000
    }
}

impl Default for Clock {
    fn default() -> Self {
        Clock::new()
    }
}

/// Reads one socket until it closes, forwarding decoded messages.
fn spawn_reader(mut stream: TcpStream, link: LinkId, kind: LinkKind, tx: Sender<Msg>) -> JoinHandle<()> {
    thread::spawn(move || {
        let mut buf = vec![0u8; 64 * 1024];
        let mut pending: Vec<u8> = Vec::new();
        let mut frames = FrameDecoder::new();
        let reason = loop {
            let n = match stream.read(&mut buf) {
                Ok(0) => break None,
                Ok(n) => n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => break Some(e.to_string()),
            };
            let ok = match kind {
                LinkKind::Mqtt => {
                    pending.extend_from_slice(&buf[..n]);
                    let mut used = 0;
                    let mut ok = true;
                    loop {
                        match decode_packet(&pending[used..]) {
                            Ok(Some((p, len))) => {
                                used += len;
                                if tx.send(Msg::Input(NodeInput::Mqtt(link, p))).is_err() {
                                    return;
                                }
                            }
                            Ok(None) => break,
                            Err(e) => {
                                warn!("link {link}: {e}");
                                ok = false;
                                break;
                            }
                        }
                    }
                    pending.drain(..used);
                    ok
                }
                LinkKind::Gateway => {
                    frames.push(&buf[..n]);
                    let mut ok = true;
                    loop {
                        match frames.next_frame() {
                            Ok(Some(payload)) => match GatewayFrame::decode(&payload) {
                                Ok(f) => {
                                    if tx.send(Msg::Input(NodeInput::Gateway(link, f))).is_err() {
                                        return;
                                    }
                                }
                                Err(e) => warn!("link {link}: {e}"),
                            },
                            Ok(None) => break,
                            Err(e) => {
                                warn!("link {link}: {e}");
                                ok = false;
                                break;
                            }
                        }
                    }
                    ok
                }
            };
            if !ok {
                break Some("protocol error".into());
            }
        };
        if let Some(r) = reason {
            debug!("link {link} closed: {r}");
        }
        let _ = stream.shutdown(Shutdown::Both);
        let _ = tx.send(Msg::Input(NodeInput::Down(link)));
    })
}

/// Accepts connections on one listener until `stop` is set.
pub fn spawn_acceptor(
    listener: TcpListener,
    kind: LinkKind,
    tx: Sender<Msg>,
    next_link: Arc<AtomicU64>,
    stop: Arc<AtomicBool>,
) -> JoinHandle<()> {
    thread::spawn(move || {
        for conn in listener.incoming() {
            if stop.load(Ordering::SeqCst) {
                break;
            }
            let stream = match conn {
                Ok(s) => s,
                Err(e) => {
                    warn!("accept failed: {e}");
                    continue;
                }
            };
            let _ = stream.set_nodelay(true);
            let link = next_link.fetch_add(1, Ordering::SeqCst);
            let Ok(read_half) = stream.try_clone() else { continue };
            if tx.send(Msg::Attach(link, kind, stream)).is_err() {
                break;
            }
            spawn_reader(read_half, link, kind, tx.clone());
        }
    })
}

/// Wakes an acceptor blocked in `accept` so it can observe its stop flag.
pub fn wake(addr: SocketAddr) {
    let _ = TcpStream::connect_timeout(&addr, Duration::from_millis(200));
}

pub fn connect(addr: SocketAddr, timeout: Duration) -> io::Result<TcpStream> {
    let deadline = Instant::now() + timeout;
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => {
                s.set_nodelay(true)?;
                return Ok(s);
            }
            Err(e) if Instant::now() >= deadline => return Err(e),
            Err(_) => thread::sleep(Duration::from_millis(20)),
        }
    }
}

/// Opens every dial of a node, returning the write halves and the inputs
/// announcing the links.
pub fn dial_all(
    node: &dyn Node,
    addrs: &BTreeMap<String, FogAddrs>,
    tx: &Sender<Msg>,
    timeout: Duration,
) -> io::Result<(BTreeMap<LinkId, TcpStream>, Vec<Connection>)> {
    let mut writers = BTreeMap::new();
    let mut conns = Vec::new();
    for d in node.dials() {
        let a = addrs
            .get(d.to.as_str())
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("no listener for {}", d.to)))?;
        let addr = match d.kind {
            LinkKind::Mqtt => a.mqtt,
            LinkKind::Gateway => a.gateway,
        };
        let stream = connect(addr, timeout)
            .map_err(|e| io::Error::new(e.kind(), format!("{} -> {} ({addr}): {e}", node.id(), d.to)))?;
        spawn_reader(stream.try_clone()?, d.link, d.kind, tx.clone());
        writers.insert(d.link, stream);
        tx.send(Msg::Input(NodeInput::Up(d.link))).expect("node queue open");
        conns.push(Connection {
            from: node.id().to_string(),
            to: d.to.to_string(),
            kind: d.kind,
        });
    }
    Ok((writers, conns))
}

/// Thread id path used for CPU accounting, when the platform has one.
fn thread_stat_path() -> Option<String> {
    let p = std::fs::read_link("/proc/thread-self").ok()?;
    Some(format!("/proc/{}/stat", p.display()))
}

/// The node event loop: feeds queued messages and deadline ticks to the
/// node and carries out its outputs. Returns when told to stop.
pub fn node_loop(
    mut node: Box<dyn Node>,
    rx: Receiver<Msg>,
    mut writers: BTreeMap<LinkId, TcpStream>,
    records: Sender<Stamped>,
    clock: Clock,
    stat_paths: Option<Sender<(String, String)>>,
) -> NodeSummary {
    let id = node.id().to_string();
    if let (Some(tx), Some(p)) = (stat_paths, thread_stat_path()) {
        let _ = tx.send((id.clone(), p));
    }
    let emit = |out: Vec<NodeOutput>, writers: &mut BTreeMap<LinkId, TcpStream>| {
        for o in out {
            let bytes = wire_bytes(&o);
            match o {
                NodeOutput::Record(record) => {
                    let _ = records.send(Stamped {
                        t_us: clock.us(),
                        node: id.clone(),
                        record,
                    });
                }
                NodeOutput::Close(link) => {
                    if let Some(s) = writers.remove(&link) {
                        let _ = s.shutdown(Shutdown::Both);
                    }
                }
                NodeOutput::Mqtt(link, _) | NodeOutput::Gateway(link, _) => {
                    let Some(s) = writers.get_mut(&link) else { continue };
                    let bytes = bytes.expect("network output");
                    if let Err(e) = s.write_all(&bytes) {
                        debug!("{id}: write on link {link} failed: {e}");
                        let _ = s.shutdown(Shutdown::Both);
                        writers.remove(&link);
                    }
                }
            }
        }
    };

    let out = node.handle(clock.ms(), NodeInput::Start);
    emit(out, &mut writers);
    let mut last_tick: Option<(u64, u64)> = None;
    loop {
        let now = clock.ms();
        let deadline = node.next_deadline();
        if let Some(d) = deadline.filter(|d| *d <= now) {
            if last_tick != Some((d, now)) {
                last_tick = Some((d, now));
                let out = node.handle(now, NodeInput::Tick);
                emit(out, &mut writers);
                continue;
            }
        }
        let wait = match deadline {
            Some(d) if d > now => Duration::from_millis(d - now),
            Some(_) => Duration::from_millis(1),
            None => Duration::from_millis(250),
        };
        match rx.recv_timeout(wait) {
            Ok(Msg::Input(input)) => {
                let out = node.handle(clock.ms(), input);
                emit(out, &mut writers);
            }
            Ok(Msg::Attach(link, kind, stream)) => {
                writers.insert(link, stream);
                let out = node.handle(clock.ms(), NodeInput::Accepted(link, kind));
                emit(out, &mut writers);
            }
            Ok(Msg::Stop) | Err(RecvTimeoutError::Disconnected) => break,
            Err(RecvTimeoutError::Timeout) => {}
        }
    }
    for s in writers.values() {
        let _ = s.shutdown(Shutdown::Both);
    }
    NodeSummary {
        id: node.id().to_string(),
        role: node.role(),
        stats: node.stats(),
        in_flight: node.in_flight(),
    }
}

/// Binds the two listeners of every fog on ephemeral loopback ports.
pub fn bind_fogs(ids: &[&str]) -> io::Result<BTreeMap<String, (TcpListener, TcpListener)>> {
    ids.iter()
        .map(|id| {
            let m = TcpListener::bind("127.0.0.1:0")?;
            let g = TcpListener::bind("127.0.0.1:0")?;
            Ok((id.to_string(), (m, g)))
        })
        .collect()
}

struct Running {
    id: String,
    tx: Sender<Msg>,
    handle: JoinHandle<NodeSummary>,
}

/// Tracks round trips and readiness from the record stream.
#[derive(Default)]
pub struct Progress {
    pub records: Vec<Stamped>,
    /// Broker sessions that completed their handshake, per node.
    pub connected: BTreeMap<String, BTreeSet<LinkId>>,
    pub open_probes: BTreeSet<u64>,
}

impl Progress {
    pub fn take(&mut self, s: Stamped) {
        match &s.record {
            Record::Connected { link } => {
                self.connected.entry(s.node.clone()).or_default().insert(*link);
            }
            Record::ProbeSent { id } => {
                self.open_probes.insert(*id);
            }
            Record::ProbeReceived { id } | Record::ProbeLost { id } => {
                self.open_probes.remove(id);
            }
            _ => {}
        }
        self.records.push(s);
    }

    /// Waits until every listed broker session is up.
    pub fn await_sessions(
        &mut self,
        expected: &BTreeMap<String, BTreeSet<LinkId>>,
        records: &Receiver<Stamped>,
        timeout: Duration,
    ) -> io::Result<()> {
        let deadline = Instant::now() + timeout;
        loop {
            let ready = expected
                .iter()
                .all(|(id, links)| self.connected.get(id).is_some_and(|c| links.is_subset(c)));
            if ready {
                return Ok(());
            }
            if Instant::now() >= deadline {
                return Err(io::Error::new(
                    io::ErrorKind::TimedOut,
                    "broker sessions did not come up",
                ));
            }
            if let Ok(s) = records.recv_timeout(Duration::from_millis(10)) {
                self.take(s);
            }
        }
    }
}

/// Broker sessions a node opens, keyed by node id when non-empty.
pub fn mqtt_dials(node: &dyn Node) -> BTreeSet<LinkId> {
    node.dials()
        .iter()
        .filter(|d| d.kind == LinkKind::Mqtt)
        .map(|d| d.link)
        .collect()
}

/// Feeds `schedule` to the node queues in real time, counting from `go_us`
/// on `clock`. Returns once sending is over and every probe is answered,
/// the drain time has passed, or the queues stayed saturated. Gives the
/// number of stimuli sent and whether the run saturated.
#[allow(clippy::too_many_arguments)]
pub fn drive(
    schedule: &[Stimulus],
    txs: &BTreeMap<String, Sender<Msg>>,
    clock: Clock,
    go_us: u64,
    settings: &LiveSettings,
    records: &Receiver<Stamped>,
    progress: &mut Progress,
    cpu: &mut CpuSampler,
) -> (usize, bool) {
    let end_us = settings.end.as_micros() as u64;
    let drain_end = end_us + settings.drain.as_micros() as u64;
    let saturation_us = settings.saturation.as_micros() as u64;
    let mut next = schedule.iter().take_while(|s| s.at_us < end_us).peekable();
    let mut above_since: Option<u64> = None;
    let mut last_check = 0u64;
    let mut sent = 0;
    loop {
        let t = clock.us() - go_us;
        while let Some(st) = next.next_if(|st| st.at_us <= t) {
            if let Some(tx) = txs.get(&st.node) {
                let _ = tx.send(Msg::Input(st.input.clone()));
                sent += 1;
            }
        }
        for s in records.try_iter() {
            progress.take(s);
        }
        if t >= last_check + 100_000 {
            last_check = t;
            cpu.sample(t / 1000);
            let backed_up = txs.values().any(|tx| tx.len() > settings.high_water);
            match (backed_up, above_since) {
                (true, None) => above_since = Some(t),
                (true, Some(since)) if t - since > saturation_us => {
                    warn!(
                        "input queues stayed above {} for {:?}",
                        settings.high_water, settings.saturation
                    );
                    return (sent, true);
                }
                (false, _) => above_since = None,
                _ => {}
            }
        }
        let idle = next.peek().is_none() && t >= end_us;
        if idle && (progress.open_probes.is_empty() || t >= drain_end) {
            return (sent, false);
        }
        let wait_us = match next.peek() {
            Some(st) => st.at_us.saturating_sub(t).min(2_000),
            None => 2_000,
        };
        if wait_us > 0 {
            if let Ok(s) = records.recv_timeout(Duration::from_micros(wait_us)) {
                progress.take(s);
            }
        }
    }
}

/// Starts `nodes` (in startup order), waits for every broker session, then
/// sends the schedule in real time. Record times are relative to the first
/// stimulus.
pub fn run_live(nodes: Vec<Box<dyn Node>>, schedule: &[Stimulus], settings: LiveSettings) -> io::Result<Outcome> {
    let clock = Clock::new();
    let (rec_tx, rec_rx) = unbounded::<Stamped>();
    let (stat_tx, stat_rx) = unbounded::<(String, String)>();
    let stop_accepting = Arc::new(AtomicBool::new(false));

    let fog_ids: Vec<String> = nodes
        .iter()
        .filter(|n| n.role() == atmosphere_core::event::NodeRole::Fog)
        .map(|n| n.id().to_string())
        .collect();
    let listeners = bind_fogs(&fog_ids.iter().map(String::as_str).collect::<Vec<_>>())?;
    let mut addrs = BTreeMap::new();
    for (id, (m, g)) in &listeners {
        addrs.insert(
            id.clone(),
            FogAddrs {
                mqtt: m.local_addr()?,
                gateway: g.local_addr()?,
            },
        );
    }

    let mut expected: BTreeMap<String, BTreeSet<LinkId>> = BTreeMap::new();
    let mut channels: BTreeMap<String, (Sender<Msg>, Receiver<Msg>)> = BTreeMap::new();
    for n in &nodes {
        channels.insert(n.id().to_string(), unbounded());
        let mqtt = mqtt_dials(n.as_ref());
        if !mqtt.is_empty() {
            expected.insert(n.id().to_string(), mqtt);
        }
    }

    let mut acceptors = Vec::new();
    for (id, (m, g)) in listeners {
        let tx = channels[&id].0.clone();
        let next = Arc::new(AtomicU64::new(FIRST_INBOUND));
        acceptors.push(spawn_acceptor(
            m,
            LinkKind::Mqtt,
            tx.clone(),
            next.clone(),
            stop_accepting.clone(),
        ));
        acceptors.push(spawn_acceptor(g, LinkKind::Gateway, tx, next, stop_accepting.clone()));
    }

    let mut running: Vec<Running> = Vec::new();
    let mut connections = Vec::new();
    let mut startup_error = None;
    for node in nodes {
        let id = node.id().to_string();
        let (tx, rx) = channels.remove(&id).expect("channel per node");
        let (writers, conns) = match dial_all(node.as_ref(), &addrs, &tx, settings.connect_timeout) {
            Ok(x) => x,
            Err(e) => {
                startup_error = Some(e);
                break;
            }
        };
        connections.extend(conns);
        let rec = rec_tx.clone();
        let stats = stat_tx.clone();
        let handle = thread::Builder::new()
            .name(format!("node-{id}"))
            .spawn(move || node_loop(node, rx, writers, rec, clock, Some(stats)))?;
        running.push(Running { id, tx, handle });
    }
    drop(stat_tx);

    let mut progress = Progress::default();
    if startup_error.is_none() {
        startup_error = progress
            .await_sessions(&expected, &rec_rx, settings.connect_timeout)
            .err();
    }

    let mut cpu = CpuSampler::new(settings.cpu_interval);
    for (id, path) in stat_rx.try_iter() {
        cpu.watch(id, path);
    }

    let go = clock.us();
    let mut saturated = false;
    let mut stimuli_sent = 0;
    if startup_error.is_none() {
        let txs: BTreeMap<String, Sender<Msg>> = running.iter().map(|r| (r.id.clone(), r.tx.clone())).collect();
        (stimuli_sent, saturated) = drive(schedule, &txs, clock, go, &settings, &rec_rx, &mut progress, &mut cpu);
    }
    let elapsed_us = clock.us() - go;

    // Edges and users first, fogs last.
    let mut nodes_out = Vec::new();
    for r in running.iter().rev() {
        let _ = r.tx.send(Msg::Stop);
    }
    for r in running.into_iter().rev() {
        match r.handle.join() {
            Ok(s) => nodes_out.push(s),
            Err(_) => warn!("node {} panicked", r.id),
        }
    }
    nodes_out.reverse();
    stop_accepting.store(true, Ordering::SeqCst);
    for a in addrs.values() {
        wake(a.mqtt);
        wake(a.gateway);
    }
    for a in acceptors {
        let _ = a.join();
    }
    drop(rec_tx);
    for s in rec_rx.try_iter() {
        progress.take(s);
    }
    if let Some(e) = startup_error {
        return Err(e);
    }

    let mut records = progress.records;
    for r in &mut records {
        r.t_us = r.t_us.saturating_sub(go);
    }
    Ok(Outcome {
        records,
        nodes: nodes_out,
        cpu: cpu.finish(),
        connections,
        stimuli_sent,
        saturated,
        elapsed_us,
    })
}
