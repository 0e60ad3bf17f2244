//! Directory of agents and their inbound queues. All inter-agent traffic
//! passes through one registry.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use super::acl::{AclMessage, Performative, Receivers};
use crate::event::{Event, FieldValue, Fields, NodeId, StreamName};

/// Stream of the notice returned to a sender for each unknown receiver.
pub const UNDELIVERABLE: &str = "Undeliverable";

/// Sender name used on notices the registry creates itself.
pub const GATEWAY_SENDER: &str = "gateway";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("sender {0:?} is not registered")]
    UnknownSender(String),
    #[error("agent {0:?} is already registered")]
    AlreadyRegistered(String),
}

#[derive(Debug, Default)]
struct Entry {
    group: String,
    queue: VecDeque<AclMessage>,
}

#[derive(Debug, Default)]
pub struct GatewayRegistry {
    agents: BTreeMap<String, Entry>,
}

/// Where a dispatched message went.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DispatchReport {
    pub delivered: Vec<String>,
    pub undeliverable: Vec<String>,
}

impl GatewayRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `agent` as a member of `group`. Broadcasts stay within a group.
    pub fn register(&mut self, agent: &str, group: &str) -> Result<(), GatewayError> {
        if self.agents.contains_key(agent) {
            return Err(GatewayError::AlreadyRegistered(agent.into()));
        }
        self.agents.insert(
            agent.into(),
            Entry {
                group: group.into(),
                queue: VecDeque::new(),
            },
        );
        Ok(())
    }

    /// Removes `agent` and returns whatever was still queued for it.
    pub fn unregister(&mut self, agent: &str) -> Vec<AclMessage> {
        self.agents.remove(agent).map(|e| e.queue.into()).unwrap_or_default()
    }

    pub fn contains(&self, agent: &str) -> bool {
        self.agents.contains_key(agent)
    }

    pub fn group_of(&self, agent: &str) -> Option<&str> {
        self.agents.get(agent).map(|e| e.group.as_str())
    }

    pub fn agents(&self) -> impl Iterator<Item = &str> {
        self.agents.keys().map(String::as_str)
    }

    /// Queues `m` for each receiver. A broadcast reaches every other member
    /// of the sender's group. Each unknown receiver yields a notice queued
    /// for the sender, and the known receivers still get the message.
    pub fn dispatch(&mut self, m: AclMessage) -> Result<DispatchReport, GatewayError> {
        let group = match self.agents.get(&m.sender) {
            Some(e) => e.group.clone(),
            None => return Err(GatewayError::UnknownSender(m.sender.clone())),
        };
        let mut report = DispatchReport::default();
        match &m.receivers {
            Receivers::Broadcast => {
                for (id, e) in &mut self.agents {
                    if *id != m.sender && e.group == group {
                        e.queue.push_back(m.clone());
                        report.delivered.push(id.clone());
                    }
                }
            }
            Receivers::To(list) => {
                for r in list {
                    match self.agents.get_mut(r) {
                        Some(e) => {
                            e.queue.push_back(m.clone());
                            report.delivered.push(r.clone());
                        }
                        None => report.undeliverable.push(r.clone()),
                    }
                }
            }
        }
        for r in &report.undeliverable {
            let notice = undeliverable_notice(&m, r);
            self.agents
                .get_mut(&m.sender)
                .expect("sender checked above")
                .queue
                .push_back(notice);
        }
        Ok(report)
    }

    pub fn pop(&mut self, agent: &str) -> Option<AclMessage> {
        self.agents.get_mut(agent)?.queue.pop_front()
    }

    pub fn drain(&mut self, agent: &str) -> Vec<AclMessage> {
        self.agents
            .get_mut(agent)
            .map(|e| e.queue.drain(..).collect())
            .unwrap_or_default()
    }

    pub fn queue_len(&self, agent: &str) -> usize {
        self.agents.get(agent).map_or(0, |e| e.queue.len())
    }
}

fn undeliverable_notice(m: &AclMessage, receiver: &str) -> AclMessage {
    let fields: Fields = [
        ("receiver", FieldValue::from(receiver)),
        ("stream", FieldValue::from(m.content.stream.as_str())),
    ]
    .into_iter()
    .collect();
    AclMessage {
        performative: Performative::Inform,
        sender: GATEWAY_SENDER.into(),
        receivers: Receivers::To(alloc::vec![m.sender.clone()]),
        content: Event::new(
            StreamName::new(UNDELIVERABLE).expect("valid stream name"),
            fields,
            m.sent_at,
            NodeId::new(GATEWAY_SENDER),
        ),
        sent_at: m.sent_at,
    }
}
