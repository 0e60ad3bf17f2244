//! Edge node: rule agents, a broker session with the fog and a gateway link
//! for agent messages.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{
    Dial, FogTopics, GatewayFrame, LinkId, LinkKind, Node, NodeInput, NodeOutput, NodeStats, Record, ECHO_SERVICE,
    MONITOR_SERVICE,
};
use crate::agent::{
    AclMessage, AgentHost, AgentSpec, Effect, HostError, Performative, Receivers, Trigger, RULE_UPDATE,
};
use crate::event::{
    decode_event_untyped, encode_event_untyped, Event, FieldValue, NodeId, NodeRole, StreamName, Timestamp,
};
use crate::mqtt::{Client, ClientConfig, ClientEvent, ClientOutput, QoS};

/// The benchmark agent of edge `e` is named `e` followed by this suffix.
pub const PROBE_AGENT_SUFFIX: &str = ".probe";

const MQTT_LINK: LinkId = 0;
const GATEWAY_LINK: LinkId = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeVia {
    /// Publish to the fog input topic; the answer is a CEP emission.
    Mqtt,
    /// Send to the gateway echo service.
    Acl,
}

/// Round-trip measurement: probes carry an integer `rt` field and complete
/// when an event with the same `rt` comes back.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeConfig {
    pub reply_stream: StreamName,
    pub via: ProbeVia,
}

/// A periodic agent message to the gateway monitor service.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Heartbeat {
    pub period_ms: u64,
    pub stream: StreamName,
}

#[derive(Debug, Clone)]
pub struct EdgeConfig {
    pub id: NodeId,
    pub fog: NodeId,
    pub topics: FogTopics,
    pub qos: QoS,
    pub agents: Vec<AgentSpec>,
    pub mqtt: bool,
    pub gateway: bool,
    pub probe: Option<ProbeConfig>,
    pub heartbeat: Option<Heartbeat>,
    pub retry_timeout_ms: u64,
    pub max_retries: u32,
}

impl EdgeConfig {
    pub fn new(id: &str, fog: &str) -> Self {
        EdgeConfig {
            id: NodeId::new(id),
            fog: NodeId::new(fog),
            topics: FogTopics::for_node(fog),
            qos: QoS::AtMostOnce,
            agents: Vec::new(),
            mqtt: true,
            gateway: true,
            probe: None,
            heartbeat: None,
            retry_timeout_ms: 1000,
            max_retries: 5,
        }
    }

    pub fn probe_agent(&self) -> String {
        format!("{}{PROBE_AGENT_SUFFIX}", self.id)
    }
}

pub struct EdgeNode {
    config: EdgeConfig,
    host: AgentHost,
    client: Client,
    gateway_up: bool,
    pending: BTreeSet<u64>,
    next_heartbeat: Option<Timestamp>,
    beats: u64,
    stats: NodeStats,
}

impl EdgeNode {
    pub fn new(config: EdgeConfig) -> Result<EdgeNode, HostError> {
        let mut host = AgentHost::new(config.id.clone());
        for a in &config.agents {
            host.add(a.clone(), 0)?;
        }
        let mut c = ClientConfig::new(config.id.as_str());
        c.subscriptions = alloc::vec![
            (config.topics.edge.clone(), config.qos),
            (config.topics.user.clone(), config.qos)
        ];
        c.retry_timeout_ms = config.retry_timeout_ms;
        c.max_retries = config.max_retries;
        Ok(EdgeNode {
            next_heartbeat: config.heartbeat.as_ref().map(|h| h.period_ms),
            host,
            client: Client::new(c),
            gateway_up: false,
            pending: BTreeSet::new(),
            beats: 0,
            stats: NodeStats::default(),
            config,
        })
    }

    pub fn config(&self) -> &EdgeConfig {
        &self.config
    }

    pub fn host(&self) -> &AgentHost {
        &self.host
    }

    pub fn pending_probes(&self) -> usize {
        self.pending.len()
    }

    fn uses_probe_agent(&self) -> bool {
        self.config.heartbeat.is_some() || self.config.probe.as_ref().is_some_and(|p| p.via == ProbeVia::Acl)
    }

    fn dead_letter(&mut self, reason: String, payload: &[u8], out: &mut Vec<NodeOutput>) {
        self.stats.dead_letters += 1;
        out.push(NodeOutput::Record(Record::DeadLetter {
            reason,
            payload: String::from_utf8_lossy(payload).into_owned(),
        }));
    }

    fn client_output(&mut self, o: ClientOutput, out: &mut Vec<NodeOutput>) {
        out.extend(o.send.into_iter().map(|p| NodeOutput::Mqtt(MQTT_LINK, p)));
        for ev in o.events {
            match ev {
                ClientEvent::Message(p) => match decode_event_untyped(&p.payload) {
                    Ok(e) => self.inbound(&p.topic, e, out),
                    Err(e) => self.dead_letter(format!("{}: {e}", p.topic), &p.payload, out),
                },
                ClientEvent::GaveUp(p) => {
                    let id = decode_event_untyped(&p.payload).ok().and_then(|e| probe_id(&e));
                    match id {
                        Some(id) if self.pending.remove(&id) => out.push(NodeOutput::Record(Record::ProbeLost { id })),
                        _ => self.dead_letter(format!("{}: delivery gave up", p.topic), &p.payload, out),
                    }
                }
                ClientEvent::ConnectFailed => out.push(NodeOutput::Record(Record::LinkFailed {
                    link: MQTT_LINK,
                    reason: format!("broker session with {} failed", self.config.fog),
                })),
                ClientEvent::Connected | ClientEvent::Subscribed => {
                    if self.client.is_ready() {
                        out.push(NodeOutput::Record(Record::Connected { link: MQTT_LINK }));
                    }
                }
                ClientEvent::Acked(_) => {}
            }
        }
    }

    fn complete_probe(&mut self, e: &Event, out: &mut Vec<NodeOutput>) -> bool {
        let Some(probe) = &self.config.probe else { return false };
        if e.stream != probe.reply_stream {
            return false;
        }
        if let Some(id) = probe_id(e) {
            if self.pending.remove(&id) {
                out.push(NodeOutput::Record(Record::ProbeReceived { id }));
            }
        }
        true
    }

    /// A broker message becomes a message stimulus for every agent with a
    /// rule on its stream. Rule updates go to every agent.
    fn inbound(&mut self, topic: &str, e: Event, out: &mut Vec<NodeOutput>) {
        if self.complete_probe(&e, out) {
            return;
        }
        let update = e.stream.as_str() == RULE_UPDATE;
        let targets: Vec<String> = self
            .host
            .agents()
            .filter(|a| {
                update
                    || a.rules()
                        .any(|r| r.trigger == Trigger::Message(e.stream.as_str().into()))
            })
            .map(|a| a.id().to_string())
            .collect();
        let sender = if topic == self.config.topics.user {
            "user".to_string()
        } else {
            self.config.fog.to_string()
        };
        for t in targets {
            let m = AclMessage {
                performative: Performative::Inform,
                sender: sender.clone(),
                receivers: Receivers::To(alloc::vec![t.clone()]),
                content: e.clone(),
                sent_at: e.timestamp,
            };
            self.host.deliver(&t, m).expect("agent listed by the host");
        }
    }

    fn run_agents(&mut self, now: Timestamp, out: &mut Vec<NodeOutput>) {
        for (agent, effect) in self.host.run(now) {
            match effect {
                Effect::Send(m) => {
                    if self.gateway_up {
                        out.push(NodeOutput::Gateway(GATEWAY_LINK, GatewayFrame::Acl(m)));
                    } else {
                        self.dead_letter(format!("{agent}: no gateway link"), &m.encode(), out);
                    }
                }
                Effect::FogPublish { topic, event } => {
                    let o = self
                        .client
                        .publish(&topic, encode_event_untyped(&event), self.config.qos, now);
                    self.client_output(o, out);
                    out.push(NodeOutput::Record(Record::FogPublish { agent, topic, event }));
                }
                Effect::Actuation { actuator, value } => {
                    out.push(NodeOutput::Record(Record::Actuation { agent, actuator, value }))
                }
                Effect::Log(line) => out.push(NodeOutput::Record(Record::AgentLog { agent, line })),
                Effect::RuleError { rule, message } => {
                    out.push(NodeOutput::Record(Record::RuleError { agent, rule, message }))
                }
                Effect::RuleReplaced { rule } => out.push(NodeOutput::Record(Record::RuleReplaced { agent, rule })),
                Effect::StateChange { .. } => {}
            }
        }
    }

    fn probe(&mut self, id: u64, event: Event, now: Timestamp, out: &mut Vec<NodeOutput>) {
        let Some(probe) = &self.config.probe else {
            self.dead_letter(
                "probe without probe configuration".into(),
                &encode_event_untyped(&event),
                out,
            );
            return;
        };
        match probe.via {
            ProbeVia::Mqtt => {
                let topic = self.config.topics.input.clone();
                let o = self
                    .client
                    .publish(&topic, encode_event_untyped(&event), self.config.qos, now);
                self.client_output(o, out);
            }
            ProbeVia::Acl => {
                let m = AclMessage {
                    performative: Performative::Request,
                    sender: self.config.probe_agent(),
                    receivers: Receivers::To(alloc::vec![ECHO_SERVICE.into()]),
                    content: event,
                    sent_at: now,
                };
                out.push(NodeOutput::Gateway(GATEWAY_LINK, GatewayFrame::Acl(m)));
            }
        }
        self.pending.insert(id);
        out.push(NodeOutput::Record(Record::ProbeSent { id }));
    }

    fn heartbeat(&mut self, now: Timestamp, out: &mut Vec<NodeOutput>) {
        let (Some(h), Some(due)) = (&self.config.heartbeat, self.next_heartbeat) else {
            return;
        };
        if due > now {
            return;
        }
        self.next_heartbeat = Some(due + h.period_ms);
        if !self.gateway_up {
            return;
        }
        let value = 40 + (self.beats % 20) as i64;
        self.beats += 1;
        let m = AclMessage {
            performative: Performative::Inform,
            sender: self.config.probe_agent(),
            receivers: Receivers::To(alloc::vec![MONITOR_SERVICE.into()]),
            content: Event::new(
                h.stream.clone(),
                [("value", FieldValue::Integer(value))].into_iter().collect(),
                now,
                self.config.id.clone(),
            ),
            sent_at: now,
        };
        out.push(NodeOutput::Gateway(GATEWAY_LINK, GatewayFrame::Acl(m)));
    }
}

fn probe_id(e: &Event) -> Option<u64> {
    match e.field("rt") {
        Some(FieldValue::Integer(i)) if *i >= 0 => Some(*i as u64),
        _ => None,
    }
}

impl Node for EdgeNode {
    fn id(&self) -> &NodeId {
        &self.config.id
    }

    fn role(&self) -> NodeRole {
        NodeRole::Edge
    }

    fn dials(&self) -> Vec<Dial> {
        let mut d = Vec::new();
        if self.config.mqtt {
            d.push(Dial {
                link: MQTT_LINK,
                kind: LinkKind::Mqtt,
                to: self.config.fog.clone(),
            });
        }
        if self.config.gateway {
            d.push(Dial {
                link: GATEWAY_LINK,
                kind: LinkKind::Gateway,
                to: self.config.fog.clone(),
            });
        }
        d
    }

    fn handle(&mut self, now: Timestamp, input: NodeInput) -> Vec<NodeOutput> {
        let mut out = Vec::new();
        match input {
            NodeInput::Start | NodeInput::Accepted(..) => {}
            NodeInput::Up(MQTT_LINK) => {
                let o = self.client.start(now);
                self.client_output(o, &mut out);
            }
            NodeInput::Up(GATEWAY_LINK) => {
                self.gateway_up = true;
                let mut agents: Vec<String> = self.host.agents().map(|a| a.id().to_string()).collect();
                if self.uses_probe_agent() {
                    agents.push(self.config.probe_agent());
                }
                out.push(NodeOutput::Gateway(
                    GATEWAY_LINK,
                    GatewayFrame::Register {
                        agents,
                        group: self.config.id.to_string(),
                    },
                ));
            }
            NodeInput::Up(_) => {}
            NodeInput::Down(link) => {
                if link == GATEWAY_LINK {
                    self.gateway_up = false;
                }
                out.push(NodeOutput::Record(Record::LinkFailed {
                    link,
                    reason: "link closed".into(),
                }));
            }
            NodeInput::Mqtt(_, pkt) => {
                let o = self.client.handle(pkt, now);
                self.client_output(o, &mut out);
            }
            NodeInput::Gateway(_, GatewayFrame::Acl(m)) => {
                let Receivers::To(to) = &m.receivers else { return out };
                let Some(agent) = to.first().cloned() else { return out };
                if agent == self.config.probe_agent() {
                    // The echo service returns the probe event unchanged.
                    if let Some(id) = probe_id(&m.content).filter(|id| self.pending.remove(id)) {
                        out.push(NodeOutput::Record(Record::ProbeReceived { id }));
                    }
                } else if self.host.deliver(&agent, m).is_err() {
                    self.dead_letter(format!("no agent {agent} on {}", self.config.id), &[], &mut out);
                }
            }
            NodeInput::Gateway(_, GatewayFrame::Register { .. }) => {}
            NodeInput::Tick => {
                let o = self.client.tick(now);
                self.client_output(o, &mut out);
                self.heartbeat(now, &mut out);
                self.host.fire_timers(now);
            }
            NodeInput::Sample { agent, sensor, value } => {
                if let Err(e) = self.host.sample(&agent, &sensor, value) {
                    self.dead_letter(e.to_string(), &[], &mut out);
                }
            }
            NodeInput::Probe { id, event } => self.probe(id, event, now, &mut out),
            NodeInput::Publish { topic, event } => {
                let o = self
                    .client
                    .publish(&topic, encode_event_untyped(&event), self.config.qos, now);
                self.client_output(o, &mut out);
            }
            NodeInput::Source { .. } => {}
        }
        self.run_agents(now, &mut out);
        out
    }

    fn next_deadline(&self) -> Option<Timestamp> {
        [self.client.next_deadline(), self.host.next_timer(), self.next_heartbeat]
            .into_iter()
            .flatten()
            .min()
    }

    fn stats(&self) -> NodeStats {
        self.stats
    }

    fn in_flight(&self) -> usize {
        self.client.inflight_count() + self.client.queued_count() + self.pending.len()
    }
}
