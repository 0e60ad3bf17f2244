//! Fog node: broker, agent gateway, CEP engine and emission router.
//!
//! The engine reads the broker through an in-process session subscribed to
//! the input topics. Its emissions re-enter the broker through the same
//! session, so edges, peers and users see them as ordinary publishes.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{stamp, Dial, FogTopics, GatewayFrame, LinkId, LinkKind, Node, NodeInput, NodeOutput, NodeStats, Record};
use crate::agent::{AclMessage, GatewayRegistry, Receivers};
use crate::cep::{ClockMode, Emission, Engine};
use crate::event::{decode_event, encode_event, NodeId, NodeRole, SchemaRegistry, Timestamp};
use crate::mqtt::{
    Broker, BrokerAction, BrokerConfig, Client, ClientConfig, ClientEvent, Connect, Packet, Publish, QoS,
};
use crate::pattern::PatternDef;

/// Gateway service that answers every message with a copy to its sender.
pub const ECHO_SERVICE: &str = "echo";
/// Gateway service that accepts messages without answering.
pub const MONITOR_SERVICE: &str = "monitor";

const LOCAL: u64 = u64::MAX;

#[derive(Debug, Clone)]
pub struct FogConfig {
    pub id: NodeId,
    pub topics: FogTopics,
    /// Further topic filters fed to the engine, such as a cloud's fog-bound
    /// output.
    pub ingest: Vec<String>,
    /// Peer fogs whose fog-bound output this node consumes.
    pub peers: Vec<NodeId>,
    pub patterns: Vec<PatternDef>,
    pub schemas: SchemaRegistry,
    pub clock: ClockMode,
    /// Qos of emission publishes.
    pub qos: QoS,
    pub cep: bool,
    pub gateway: bool,
    pub broker: BrokerConfig,
}

impl FogConfig {
    pub fn new(id: &str, schemas: SchemaRegistry, patterns: Vec<PatternDef>) -> Self {
        FogConfig {
            id: NodeId::new(id),
            topics: FogTopics::for_node(id),
            ingest: Vec::new(),
            peers: Vec::new(),
            patterns,
            schemas,
            clock: ClockMode::EventTime,
            qos: QoS::AtMostOnce,
            cep: true,
            gateway: true,
            broker: BrokerConfig::default(),
        }
    }
}

pub struct FogNode {
    config: FogConfig,
    broker: Broker,
    engine: Option<Engine>,
    registry: GatewayRegistry,
    /// Gateway link of each remote agent.
    agent_links: BTreeMap<String, LinkId>,
    mqtt_links: BTreeSet<LinkId>,
    gateway_links: BTreeSet<LinkId>,
    /// Client sessions on peer brokers, keyed by link.
    peers: BTreeMap<LinkId, Client>,
    next_local_id: u16,
    stats: NodeStats,
}

impl FogNode {
    /// Deploys the patterns; fails if they do not form a valid graph.
    pub fn new(config: FogConfig) -> Result<FogNode, crate::cep::CepError> {
        let engine = if config.cep {
            let mut e = Engine::new(config.schemas.clone(), config.clock, 0).with_source(config.id.clone());
            e.deploy_all(config.patterns.iter().cloned())?;
            Some(e)
        } else {
            None
        };
        let mut registry = GatewayRegistry::new();
        for s in [ECHO_SERVICE, MONITOR_SERVICE] {
            registry
                .register(s, config.id.as_str())
                .expect("service names are distinct");
        }
        let peers = config
            .peers
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut c = ClientConfig::new(format!("{}@{}", config.id, p));
                c.subscriptions = alloc::vec![(FogTopics::for_node(p.as_str()).fog, QoS::AtLeastOnce)];
                c.retry_timeout_ms = config.broker.retry_timeout_ms;
                c.max_retries = config.broker.max_retries;
                (i as LinkId, Client::new(c))
            })
            .collect();
        Ok(FogNode {
            broker: Broker::new(config.broker),
            engine,
            registry,
            agent_links: BTreeMap::new(),
            mqtt_links: BTreeSet::new(),
            gateway_links: BTreeSet::new(),
            peers,
            next_local_id: 1,
            stats: NodeStats::default(),
            config,
        })
    }

    pub fn config(&self) -> &FogConfig {
        &self.config
    }

    pub fn engine(&self) -> Option<&Engine> {
        self.engine.as_ref()
    }

    pub fn registry(&self) -> &GatewayRegistry {
        &self.registry
    }

    fn start(&mut self, now: Timestamp) {
        self.broker.open(LOCAL);
        let mut c = Connect::new(format!("{}.cep", self.config.id), 0);
        c.clean_session = true;
        self.broker.handle(LOCAL, Packet::Connect(c), now);
        if self.engine.is_some() {
            let mut filters = alloc::vec![(self.config.topics.input.clone(), QoS::AtMostOnce)];
            filters.extend(self.config.ingest.iter().map(|t| (t.clone(), QoS::AtMostOnce)));
            self.broker
                .handle(LOCAL, Packet::Subscribe { packet_id: 1, filters }, now);
        }
    }

    fn count(&mut self, p: &Packet) {
        match p {
            Packet::Publish(_) => self.stats.publish += 1,
            Packet::PubAck(_) => self.stats.puback += 1,
            _ => {}
        }
    }

    /// Carries out broker actions; deliveries to the engine session are
    /// ingested and their emissions published in turn.
    fn run_broker(&mut self, actions: Vec<BrokerAction>, now: Timestamp, out: &mut Vec<NodeOutput>) {
        let mut work: VecDeque<BrokerAction> = actions.into();
        while let Some(a) = work.pop_front() {
            match a {
                BrokerAction::Send(LOCAL, Packet::Publish(p)) => {
                    for publish in self.ingest(&p, now, out) {
                        work.extend(self.broker.handle_publish(LOCAL, publish, now));
                    }
                }
                BrokerAction::Send(LOCAL, _) | BrokerAction::Close(LOCAL) => {}
                BrokerAction::Send(conn, pkt) => {
                    self.count(&pkt);
                    out.push(NodeOutput::Mqtt(conn, pkt));
                }
                BrokerAction::Close(conn) => {
                    self.mqtt_links.remove(&conn);
                    out.push(NodeOutput::Close(conn));
                }
            }
        }
    }

    fn dead_letter(&mut self, reason: String, payload: &[u8], out: &mut Vec<NodeOutput>) {
        self.stats.dead_letters += 1;
        out.push(NodeOutput::Record(Record::DeadLetter {
            reason,
            payload: String::from_utf8_lossy(payload).into_owned(),
        }));
    }

    /// Feeds one publish to the engine and returns the routed emissions.
    fn ingest(&mut self, p: &Publish, now: Timestamp, out: &mut Vec<NodeOutput>) -> Vec<Publish> {
        let Some(engine) = self.engine.as_mut() else {
            return Vec::new();
        };
        let event = match decode_event(&p.payload, engine.schemas()) {
            Ok(e) => stamp(engine, e, now, &mut self.stats),
            Err(e) => {
                self.dead_letter(format!("{}: {e}", p.topic), &p.payload, out);
                return Vec::new();
            }
        };
        let emissions = match engine.ingest(event) {
            Ok(em) => em,
            Err(e) => {
                self.dead_letter(format!("{}: {e}", p.topic), &p.payload, out);
                return Vec::new();
            }
        };
        self.stats.cep_ingested += 1;
        self.route(emissions, out)
    }

    fn route(&mut self, emissions: Vec<Emission>, out: &mut Vec<NodeOutput>) -> Vec<Publish> {
        let mut publishes = Vec::new();
        for em in emissions {
            self.stats.cep_emitted += 1;
            let target = em.target.unwrap_or(NodeRole::Fog);
            let topic = self.config.topics.for_target(target).to_string();
            let schemas = self.engine.as_ref().expect("routing needs an engine").schemas();
            let payload = encode_event(&em.event, schemas).expect("emissions conform to their schema");
            let publish = match self.config.qos {
                QoS::AtMostOnce => Publish::at_most_once(topic.clone(), payload),
                QoS::AtLeastOnce => {
                    let id = self.next_local_id;
                    self.next_local_id = self.next_local_id.checked_add(1).unwrap_or(1);
                    Publish::at_least_once(topic.clone(), payload, id)
                }
            };
            out.push(NodeOutput::Record(Record::Emission {
                pattern: em.produced_by,
                topic: Some(topic.clone()),
                event: em.event,
            }));
            publishes.push(publish);
        }
        publishes
    }

    fn advance(&mut self, now: Timestamp, out: &mut Vec<NodeOutput>) {
        let Some(engine) = self.engine.as_mut() else { return };
        if engine.next_boundary().is_some_and(|b| b <= now) {
            let emissions = engine.advance_clock(now).expect("advancing never regresses");
            let publishes = self.route(emissions, out);
            for p in publishes {
                let actions = self.broker.handle_publish(LOCAL, p, now);
                self.run_broker(actions, now, out);
            }
        }
    }

    fn gateway_frame(&mut self, link: LinkId, frame: GatewayFrame, now: Timestamp, out: &mut Vec<NodeOutput>) {
        if !self.config.gateway {
            return;
        }
        match frame {
            GatewayFrame::Register { agents, group } => {
                for a in agents {
                    match self.registry.register(&a, &group) {
                        Ok(()) => {
                            self.agent_links.insert(a, link);
                        }
                        Err(e) => out.push(NodeOutput::Record(Record::LinkFailed {
                            link,
                            reason: e.to_string(),
                        })),
                    }
                }
            }
            GatewayFrame::Acl(m) => {
                self.stats.acl += 1;
                self.dispatch(m, now, out);
            }
        }
    }

    fn dispatch(&mut self, m: AclMessage, now: Timestamp, out: &mut Vec<NodeOutput>) {
        let mut work = VecDeque::from([m]);
        while let Some(m) = work.pop_front() {
            let sender = m.sender.clone();
            let report = match self.registry.dispatch(m) {
                Ok(r) => r,
                Err(e) => {
                    self.stats.dead_letters += 1;
                    out.push(NodeOutput::Record(Record::DeadLetter {
                        reason: e.to_string(),
                        payload: String::new(),
                    }));
                    continue;
                }
            };
            let mut touched = report.delivered;
            if !report.undeliverable.is_empty() {
                touched.push(sender);
            }
            for agent in touched {
                for msg in self.registry.drain(&agent) {
                    match agent.as_str() {
                        ECHO_SERVICE => work.push_back(AclMessage {
                            performative: msg.performative,
                            sender: ECHO_SERVICE.into(),
                            receivers: Receivers::To(alloc::vec![msg.sender.clone()]),
                            content: msg.content,
                            sent_at: now,
                        }),
                        MONITOR_SERVICE => {}
                        _ => {
                            if let Some(&link) = self.agent_links.get(&agent) {
                                self.stats.acl += 1;
                                // Each copy names the one agent it is for.
                                let copy = AclMessage {
                                    receivers: Receivers::To(alloc::vec![agent.clone()]),
                                    ..msg
                                };
                                out.push(NodeOutput::Gateway(link, GatewayFrame::Acl(copy)));
                            }
                        }
                    }
                }
            }
        }
    }

    fn peer_output(&mut self, link: LinkId, o: crate::mqtt::ClientOutput, now: Timestamp, out: &mut Vec<NodeOutput>) {
        out.extend(o.send.into_iter().map(|p| NodeOutput::Mqtt(link, p)));
        for ev in o.events {
            match ev {
                ClientEvent::Message(p) => {
                    for publish in self.ingest(&p, now, out) {
                        let actions = self.broker.handle_publish(LOCAL, publish, now);
                        self.run_broker(actions, now, out);
                    }
                }
                ClientEvent::ConnectFailed => out.push(NodeOutput::Record(Record::LinkFailed {
                    link,
                    reason: "peer broker refused the session".into(),
                })),
                ClientEvent::Connected | ClientEvent::Subscribed
                    if self.peers.get(&link).is_some_and(Client::is_ready) =>
                {
                    out.push(NodeOutput::Record(Record::Connected { link }));
                }
                _ => {}
            }
        }
    }
}

impl Node for FogNode {
    fn id(&self) -> &NodeId {
        &self.config.id
    }

    fn role(&self) -> NodeRole {
        NodeRole::Fog
    }

    fn dials(&self) -> Vec<Dial> {
        self.config
            .peers
            .iter()
            .enumerate()
            .map(|(i, p)| Dial {
                link: i as LinkId,
                kind: LinkKind::Mqtt,
                to: p.clone(),
            })
            .collect()
    }

    fn handle(&mut self, now: Timestamp, input: NodeInput) -> Vec<NodeOutput> {
        let mut out = Vec::new();
        // Boundaries due before this input close first.
        if !matches!(input, NodeInput::Start) {
            self.advance(now, &mut out);
        }
        match input {
            NodeInput::Start => self.start(now),
            NodeInput::Up(link) => {
                if let Some(c) = self.peers.get_mut(&link) {
                    let o = c.start(now);
                    self.peer_output(link, o, now, &mut out);
                }
            }
            NodeInput::Accepted(link, LinkKind::Mqtt) => {
                self.mqtt_links.insert(link);
                self.broker.open(link);
            }
            NodeInput::Accepted(link, LinkKind::Gateway) => {
                if self.config.gateway {
                    self.gateway_links.insert(link);
                } else {
                    out.push(NodeOutput::Close(link));
                }
            }
            NodeInput::Down(link) => {
                if self.mqtt_links.remove(&link) {
                    self.broker.closed(link);
                }
                if self.gateway_links.remove(&link) {
                    let gone: Vec<String> = self
                        .agent_links
                        .iter()
                        .filter(|(_, l)| **l == link)
                        .map(|(a, _)| a.clone())
                        .collect();
                    for a in gone {
                        self.agent_links.remove(&a);
                        self.registry.unregister(&a);
                    }
                }
            }
            NodeInput::Mqtt(link, pkt) => {
                if let Some(c) = self.peers.get_mut(&link) {
                    let o = c.handle(pkt, now);
                    self.peer_output(link, o, now, &mut out);
                } else if self.mqtt_links.contains(&link) {
                    self.count(&pkt);
                    let actions = self.broker.handle(link, pkt, now);
                    self.run_broker(actions, now, &mut out);
                }
            }
            NodeInput::Gateway(link, frame) => {
                if self.gateway_links.contains(&link) {
                    self.gateway_frame(link, frame, now, &mut out);
                }
            }
            NodeInput::Tick => {
                let actions = self.broker.retransmit_tick(now);
                self.run_broker(actions, now, &mut out);
                let links: Vec<LinkId> = self.peers.keys().copied().collect();
                for link in links {
                    let o = self.peers.get_mut(&link).expect("listed").tick(now);
                    self.peer_output(link, o, now, &mut out);
                }
            }
            NodeInput::Sample { .. }
            | NodeInput::Probe { .. }
            | NodeInput::Publish { .. }
            | NodeInput::Source { .. } => {}
        }
        out
    }

    fn next_deadline(&self) -> Option<Timestamp> {
        [
            self.broker.next_deadline(),
            self.engine.as_ref().and_then(Engine::next_boundary),
            self.peers.values().filter_map(Client::next_deadline).min(),
        ]
        .into_iter()
        .flatten()
        .min()
    }

    fn stats(&self) -> NodeStats {
        self.stats
    }

    fn in_flight(&self) -> usize {
        self.broker.inflight_count() + self.peers.values().map(Client::inflight_count).sum::<usize>()
    }
}
