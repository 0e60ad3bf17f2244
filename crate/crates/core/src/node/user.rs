//! User node: a broker session on a fog that records what arrives on its
//! subscriptions and publishes scripted messages such as rule updates.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::{Dial, LinkId, LinkKind, Node, NodeInput, NodeOutput, NodeStats, Record};
use crate::event::{decode_event_untyped, encode_event_untyped, NodeId, NodeRole, Timestamp};
use crate::mqtt::{Client, ClientConfig, ClientEvent, ClientOutput, QoS};

const LINK: LinkId = 0;

#[derive(Debug, Clone)]
pub struct UserConfig {
    pub id: NodeId,
    pub fog: NodeId,
    pub subscriptions: Vec<String>,
    pub qos: QoS,
}

pub struct UserNode {
    config: UserConfig,
    client: Client,
    stats: NodeStats,
}

impl UserNode {
    pub fn new(config: UserConfig) -> Self {
        let mut c = ClientConfig::new(config.id.as_str());
        c.subscriptions = config.subscriptions.iter().map(|s| (s.clone(), config.qos)).collect();
        UserNode {
            client: Client::new(c),
            config,
            stats: NodeStats::default(),
        }
    }

    fn client_output(&mut self, o: ClientOutput, out: &mut Vec<NodeOutput>) {
        out.extend(o.send.into_iter().map(|p| NodeOutput::Mqtt(LINK, p)));
        for ev in o.events {
            match ev {
                ClientEvent::Message(p) => match decode_event_untyped(&p.payload) {
                    Ok(event) => out.push(NodeOutput::Record(Record::Received { topic: p.topic, event })),
                    Err(e) => {
                        self.stats.dead_letters += 1;
                        out.push(NodeOutput::Record(Record::DeadLetter {
                            reason: format!("{}: {e}", p.topic),
                            payload: String::from_utf8_lossy(&p.payload).into_owned(),
                        }));
                    }
                },
                ClientEvent::ConnectFailed => out.push(NodeOutput::Record(Record::LinkFailed {
                    link: LINK,
                    reason: format!("broker session with {} failed", self.config.fog),
                })),
                ClientEvent::Connected | ClientEvent::Subscribed if self.client.is_ready() => {
                    out.push(NodeOutput::Record(Record::Connected { link: LINK }));
                }
                _ => {}
            }
        }
    }
}

impl Node for UserNode {
    fn id(&self) -> &NodeId {
        &self.config.id
    }

    fn role(&self) -> NodeRole {
        NodeRole::User
    }

    fn dials(&self) -> Vec<Dial> {
        alloc::vec![Dial {
            link: LINK,
            kind: LinkKind::Mqtt,
            to: self.config.fog.clone(),
        }]
    }

    fn handle(&mut self, now: Timestamp, input: NodeInput) -> Vec<NodeOutput> {
        let mut out = Vec::new();
        let o = match input {
            NodeInput::Up(LINK) => self.client.start(now),
            NodeInput::Mqtt(LINK, pkt) => self.client.handle(pkt, now),
            NodeInput::Tick => self.client.tick(now),
            NodeInput::Publish { topic, event } => {
                self.client
                    .publish(&topic, encode_event_untyped(&event), self.config.qos, now)
            }
            _ => ClientOutput::default(),
        };
        self.client_output(o, &mut out);
        out
    }

    fn next_deadline(&self) -> Option<Timestamp> {
        self.client.next_deadline()
    }

    fn stats(&self) -> NodeStats {
        self.stats
    }

    fn in_flight(&self) -> usize {
        self.client.inflight_count() + self.client.queued_count()
    }
}
