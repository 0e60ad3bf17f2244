//! Deterministic discrete-event runtime.
//!
//! All nodes share one virtual millisecond clock. Links deliver in order
//! after a fixed delay, and every message crosses the wire codecs, so a
//! simulated run exercises the same bytes as a live one. Ties are broken by
//! insertion order, which makes a run a pure function of its inputs.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use atmosphere_core::agent::FrameDecoder;
use atmosphere_core::mqtt::decode_packet;
use atmosphere_core::node::{GatewayFrame, LinkId, LinkKind, Node, NodeInput, NodeOutput, Record};

use crate::runtime::{wire_bytes, Connection, NodeSummary, Outcome, Stamped};
use crate::schedule::Stimulus;

/// Inbound link ids start here so they never collide with dial ids.
pub const FIRST_INBOUND: LinkId = 1 << 32;

#[derive(Debug, Clone, Copy)]
pub struct SimSettings {
    pub latency_ms: u64,
    /// No stimulus is delivered at or after this time.
    pub end_ms: u64,
    /// Extra virtual time for replies and window boundaries.
    pub drain_ms: u64,
}

enum Ev {
    Input(usize, NodeInput),
    Tick(usize, u64),
}

struct Entry {
    at: u64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Entry {
    fn eq(&self, o: &Self) -> bool {
        (self.at, self.seq) == (o.at, o.seq)
    }
}
impl Eq for Entry {}
impl PartialOrd for Entry {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Entry {
    fn cmp(&self, o: &Self) -> Ordering {
        (o.at, o.seq).cmp(&(self.at, self.seq))
    }
}

struct Sim {
    nodes: Vec<Box<dyn Node>>,
    queue: BinaryHeap<Entry>,
    seq: u64,
    now: u64,
    latency: u64,
    links: BTreeMap<(usize, LinkId), (usize, LinkId, LinkKind)>,
    next_inbound: Vec<LinkId>,
    /// Scheduled tick per node and its generation.
    ticks: Vec<(Option<u64>, u64)>,
    records: Vec<Stamped>,
}

impl Sim {
    fn push(&mut self, at: u64, ev: Ev) {
        self.seq += 1;
        self.queue.push(Entry { at, seq: self.seq, ev });
    }

    fn deliver(&mut self, n: usize, input: NodeInput) {
        let out = self.nodes[n].handle(self.now, input);
        self.apply(n, out);
        self.reschedule(n);
    }

    fn reschedule(&mut self, n: usize) {
        let d = self.nodes[n].next_deadline();
        let (cur, gen) = self.ticks[n];
        if d != cur {
            let gen = gen + 1;
            self.ticks[n] = (d, gen);
            if let Some(d) = d {
                let at = d.max(self.now);
                self.push(at, Ev::Tick(n, gen));
            }
        }
    }

    fn apply(&mut self, n: usize, out: Vec<NodeOutput>) {
        for o in out {
            let bytes = wire_bytes(&o);
            match o {
                NodeOutput::Record(record) => self.records.push(Stamped {
                    t_us: self.now * 1000,
                    node: self.nodes[n].id().to_string(),
                    record,
                }),
                NodeOutput::Close(link) => {
                    if let Some((peer, plink, _)) = self.links.remove(&(n, link)) {
                        self.links.remove(&(peer, plink));
                        self.push(self.now + self.latency, Ev::Input(peer, NodeInput::Down(plink)));
                    }
                }
                NodeOutput::Mqtt(link, _) | NodeOutput::Gateway(link, _) => {
                    let Some(&(peer, plink, kind)) = self.links.get(&(n, link)) else {
                        continue;
                    };
                    let bytes = bytes.expect("network output");
                    let input = match kind {
                        LinkKind::Mqtt => {
                            let (p, used) = decode_packet(&bytes)
                                .expect("encoded packets decode")
                                .expect("complete packet");
                            debug_assert_eq!(used, bytes.len());
                            NodeInput::Mqtt(plink, p)
                        }
                        LinkKind::Gateway => {
                            let mut d = FrameDecoder::new();
                            d.push(&bytes);
                            let payload = d.next_frame().expect("valid frame").expect("complete frame");
                            let frame = GatewayFrame::decode(&payload).expect("encoded frames decode");
                            NodeInput::Gateway(plink, frame)
                        }
                    };
                    self.push(self.now + self.latency, Ev::Input(peer, input));
                }
            }
        }
    }
}

/// Runs `nodes` (in startup order) against `schedule` in virtual time.
pub fn run_sim(nodes: Vec<Box<dyn Node>>, schedule: &[Stimulus], settings: SimSettings) -> Outcome {
    let count = nodes.len();
    let mut sim = Sim {
        nodes,
        queue: BinaryHeap::new(),
        seq: 0,
        now: 0,
        latency: settings.latency_ms,
        links: BTreeMap::new(),
        next_inbound: vec![FIRST_INBOUND; count],
        ticks: vec![(None, 0); count],
        records: Vec::new(),
    };
    let index: BTreeMap<String, usize> = sim
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.id().to_string(), i))
        .collect();

    for n in 0..count {
        sim.deliver(n, NodeInput::Start);
    }
    let mut connections = Vec::new();
    for n in 0..count {
        for dial in sim.nodes[n].dials() {
            let Some(&target) = index.get(dial.to.as_str()) else {
                let out = vec![NodeOutput::Record(Record::LinkFailed {
                    link: dial.link,
                    reason: format!("no node {}", dial.to),
                })];
                sim.apply(n, out);
                continue;
            };
            let inbound = sim.next_inbound[target];
            sim.next_inbound[target] += 1;
            sim.links.insert((n, dial.link), (target, inbound, dial.kind));
            sim.links.insert((target, inbound), (n, dial.link, dial.kind));
            connections.push(Connection {
                from: sim.nodes[n].id().to_string(),
                to: dial.to.to_string(),
                kind: dial.kind,
            });
            sim.deliver(target, NodeInput::Accepted(inbound, dial.kind));
            sim.deliver(n, NodeInput::Up(dial.link));
        }
    }

    let end = settings.end_ms;
    let mut stimuli_sent = 0;
    for st in schedule {
        let at = st.at_us / 1000;
        if at >= end {
            break;
        }
        if let Some(&n) = index.get(&st.node) {
            sim.push(at, Ev::Input(n, st.input.clone()));
            stimuli_sent += 1;
        }
    }

    let horizon = end + settings.drain_ms;
    while let Some(e) = sim.queue.pop() {
        if e.at > horizon {
            break;
        }
        sim.now = sim.now.max(e.at);
        match e.ev {
            Ev::Input(n, input) => sim.deliver(n, input),
            Ev::Tick(n, gen) => {
                if sim.ticks[n].1 != gen {
                    continue;
                }
                sim.ticks[n].0 = None;
                sim.deliver(n, NodeInput::Tick);
                // A deadline that did not move would spin at this instant.
                if sim.ticks[n].0.is_some_and(|d| d <= sim.now) {
                    let gen = sim.ticks[n].1 + 1;
                    sim.ticks[n] = (Some(sim.now + 1), gen);
                    sim.push(sim.now + 1, Ev::Tick(n, gen));
                }
            }
        }
    }

    Outcome {
        nodes: sim
            .nodes
            .iter()
            .map(|n| NodeSummary {
                id: n.id().to_string(),
                role: n.role(),
                stats: n.stats(),
                in_flight: n.in_flight(),
            })
            .collect(),
        records: sim.records,
        cpu: Vec::new(),
        connections,
        stimuli_sent,
        saturated: false,
        elapsed_us: sim.now * 1000,
    }
}
