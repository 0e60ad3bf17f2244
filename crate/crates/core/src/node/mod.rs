//! Edge, fog, cloud and user nodes as transport-independent state machines.
//!
//! A runtime owns the links between nodes. It feeds each node
//! [`NodeInput`]s stamped with the node's clock and carries out the
//! returned [`NodeOutput`]s. Nodes dial the links they need; servers (fog
//! brokers and gateways) receive inbound links with ids chosen by the
//! runtime.

mod cloud;
mod edge;
mod fog;
mod user;

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agent::{AclError, AclMessage};
use crate::cep::{ClockMode, Engine};
use crate::event::{Event, FieldValue, NodeId, NodeRole, Timestamp};
use crate::mqtt::Packet;

pub use cloud::{
    CloudConfig, CloudError, CloudNode, FieldMapping, SinkKind, SinkSpec, SourceSpec, TransformError, TransformerSpec,
    EVENT_TRANSFORMER,
};
pub use edge::{EdgeConfig, EdgeNode, Heartbeat, ProbeConfig, ProbeVia, PROBE_AGENT_SUFFIX};
pub use fog::{FogConfig, FogNode, ECHO_SERVICE, MONITOR_SERVICE};
pub use user::{UserConfig, UserNode};

pub type LinkId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkKind {
    Mqtt,
    Gateway,
}

/// An outbound link a node wants the runtime to open.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dial {
    pub link: LinkId,
    pub kind: LinkKind,
    pub to: NodeId,
}

/// Messages on gateway links: registrations and agent messages.
#[derive(Debug, Clone, PartialEq)]
pub enum GatewayFrame {
    Register { agents: Vec<String>, group: String },
    Acl(AclMessage),
}

impl GatewayFrame {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            GatewayFrame::Register { agents, group } => {
                serde_json::to_vec(&serde_json::json!({"register": {"agents": agents, "group": group}}))
                    .expect("JSON values serialize")
            }
            GatewayFrame::Acl(m) => m.encode(),
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<GatewayFrame, AclError> {
        let v: Value = serde_json::from_slice(bytes).map_err(|e| AclError::Malformed(e.to_string()))?;
        match v.get("register") {
            Some(r) => {
                #[derive(Deserialize)]
                struct Reg {
                    agents: Vec<String>,
                    group: String,
                }
                let r: Reg = serde_json::from_value(r.clone()).map_err(|e| AclError::Malformed(e.to_string()))?;
                Ok(GatewayFrame::Register {
                    agents: r.agents,
                    group: r.group,
                })
            }
            None => AclMessage::from_json(v).map(GatewayFrame::Acl),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeInput {
    /// Delivered once before anything else.
    Start,
    /// A dialed link is open.
    Up(LinkId),
    /// A peer opened a link to this node.
    Accepted(LinkId, LinkKind),
    Down(LinkId),
    Mqtt(LinkId, Packet),
    Gateway(LinkId, GatewayFrame),
    /// The deadline reported by `next_deadline` has passed.
    Tick,
    /// A sensor reading for an agent on an edge node.
    Sample {
        agent: String,
        sensor: String,
        value: FieldValue,
    },
    /// A benchmark round trip starting at an edge node.
    Probe {
        id: u64,
        event: Event,
    },
    /// An event an edge or user node publishes directly.
    Publish {
        topic: String,
        event: Event,
    },
    /// Raw data from an external source arriving at a cloud node.
    Source {
        topic: String,
        payload: Vec<u8>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeOutput {
    Mqtt(LinkId, Packet),
    Gateway(LinkId, GatewayFrame),
    Close(LinkId),
    Record(Record),
}

/// Observable outcomes, collected by the runtime.
#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    ProbeSent {
        id: u64,
    },
    ProbeReceived {
        id: u64,
    },
    /// A qos 1 probe publish ran out of retries.
    ProbeLost {
        id: u64,
    },
    Actuation {
        agent: String,
        actuator: String,
        value: FieldValue,
    },
    AgentLog {
        agent: String,
        line: String,
    },
    RuleError {
        agent: String,
        rule: String,
        message: String,
    },
    RuleReplaced {
        agent: String,
        rule: String,
    },
    FogPublish {
        agent: String,
        topic: String,
        event: Event,
    },
    /// A CEP emission and the topic it was routed to, or `None` for a
    /// notification sink.
    Emission {
        pattern: String,
        topic: Option<String>,
        event: Event,
    },
    Notification {
        sink: String,
        event: Event,
    },
    /// A message a user node received.
    Received {
        topic: String,
        event: Event,
    },
    DeadLetter {
        reason: String,
        payload: String,
    },
    /// A broker session finished its handshake and subscriptions.
    Connected {
        link: LinkId,
    },
    /// A link could not be established or was lost.
    LinkFailed {
        link: LinkId,
        reason: String,
    },
}

/// Traffic and processing counters. Packet counts cover the network links of
/// the node's broker only.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeStats {
    pub publish: u64,
    pub puback: u64,
    pub acl: u64,
    pub cep_ingested: u64,
    pub cep_emitted: u64,
    pub dead_letters: u64,
    pub late_events: u64,
}

impl NodeStats {
    pub fn add(&mut self, o: &NodeStats) {
        self.publish += o.publish;
        self.puback += o.puback;
        self.acl += o.acl;
        self.cep_ingested += o.cep_ingested;
        self.cep_emitted += o.cep_emitted;
        self.dead_letters += o.dead_letters;
        self.late_events += o.late_events;
    }
}

pub trait Node: Send {
    fn id(&self) -> &NodeId;
    fn role(&self) -> NodeRole;
    fn dials(&self) -> Vec<Dial>;
    fn handle(&mut self, now: Timestamp, input: NodeInput) -> Vec<NodeOutput>;
    fn next_deadline(&self) -> Option<Timestamp>;
    fn stats(&self) -> NodeStats;
    /// Unacknowledged qos 1 messages and unanswered probes held by the node.
    fn in_flight(&self) -> usize;
}

/// Topic names for a fog node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FogTopics {
    pub input: String,
    pub edge: String,
    pub cloud: String,
    pub fog: String,
    pub user: String,
}

impl FogTopics {
    pub fn for_node(id: &str) -> Self {
        FogTopics {
            input: alloc::format!("{id}/in"),
            edge: alloc::format!("{id}/out/edge"),
            cloud: alloc::format!("{id}/out/cloud"),
            fog: alloc::format!("{id}/out/fog"),
            user: alloc::format!("{id}/user"),
        }
    }

    pub fn for_target(&self, target: NodeRole) -> &str {
        match target {
            NodeRole::Edge => &self.edge,
            NodeRole::Cloud => &self.cloud,
            NodeRole::Fog => &self.fog,
            NodeRole::User => &self.user,
        }
    }

    pub fn all(&self) -> [&str; 5] {
        [&self.input, &self.edge, &self.cloud, &self.fog, &self.user]
    }
}

/// Input topic of a cloud source, `<cloud>/in/<source>`.
pub fn cloud_source_topic(cloud: &str, source: &str) -> String {
    alloc::format!("{cloud}/in/{source}")
}

/// Fog-bound output topic of a cloud node.
pub fn cloud_fog_topic(cloud: &str) -> String {
    alloc::format!("{cloud}/out/fog")
}

/// Timestamp an event gets on ingest: the arrival time under processing
/// time, and never earlier than the engine clock under event time.
pub(crate) fn stamp(engine: &Engine, mut event: Event, now: Timestamp, stats: &mut NodeStats) -> Event {
    match engine.mode() {
        ClockMode::EventTime if event.timestamp < engine.clock() => {
            event.timestamp = engine.clock();
            stats.late_events += 1;
        }
        ClockMode::ProcessingTime => event.timestamp = now.max(engine.clock()),
        ClockMode::EventTime => {}
    }
    event
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{Performative, Receivers};
    use crate::event::StreamName;

    #[test]
    fn gateway_frames_round_trip() {
        let frames = [
            GatewayFrame::Register {
                agents: alloc::vec!["e1.o2".into(), "e1.light".into()],
                group: "e1".into(),
            },
            GatewayFrame::Acl(AclMessage {
                performative: Performative::Inform,
                sender: "e1.o2".into(),
                receivers: Receivers::Broadcast,
                content: Event::new(
                    StreamName::new("O2Level").unwrap(),
                    [("value", FieldValue::Integer(85))].into_iter().collect(),
                    5,
                    NodeId::new("e1"),
                ),
                sent_at: 5,
            }),
        ];
        for f in frames {
            assert_eq!(GatewayFrame::decode(&f.encode()), Ok(f));
        }
        assert!(GatewayFrame::decode(b"{}").is_err());
    }

    #[test]
    fn topic_convention() {
        let t = FogTopics::for_node("f1");
        assert_eq!(
            t.all(),
            ["f1/in", "f1/out/edge", "f1/out/cloud", "f1/out/fog", "f1/user"]
        );
        assert_eq!(t.for_target(NodeRole::User), "f1/user");
        assert_eq!(cloud_source_topic("c1", "pharmacy"), "c1/in/pharmacy");
        assert_eq!(cloud_fog_topic("c1"), "c1/out/fog");
    }
}
