//! Client-side protocol state: connect and subscribe handshakes, qos 1
//! publish tracking with retransmission, and acknowledgement of deliveries.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::string::String;
use alloc::vec::Vec;

use super::broker::Inflight;
use super::codec::{Connect, Packet, Publish, QoS};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientConfig {
    pub client_id: String,
    pub keep_alive: u16,
    pub retry_timeout_ms: u64,
    pub max_retries: u32,
    pub subscriptions: Vec<(String, QoS)>,
}

impl ClientConfig {
    pub fn new(client_id: impl Into<String>) -> Self {
        ClientConfig {
            client_id: client_id.into(),
            keep_alive: 60,
            retry_timeout_ms: 1000,
            max_retries: 5,
            subscriptions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientEvent {
    Connected,
    Subscribed,
    ConnectFailed,
    Message(Publish),
    Acked(u16),
    GaveUp(Publish),
}

#[derive(Debug, Default, PartialEq, Eq)]
pub struct ClientOutput {
    pub send: Vec<Packet>,
    pub events: Vec<ClientEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Idle,
    Connecting { sent_at: u64, attempts: u32 },
    Subscribing { sent_at: u64, attempts: u32 },
    Ready,
    Failed,
}

const SUBSCRIBE_ID: u16 = 1;
const RECENT_INBOUND: usize = 256;

#[derive(Debug)]
pub struct Client {
    config: ClientConfig,
    phase: Phase,
    inflight: BTreeMap<u16, Inflight>,
    queued: VecDeque<Publish>,
    next_id: u16,
    recent_inbound: VecDeque<u16>,
}

impl Client {
    pub fn new(config: ClientConfig) -> Self {
        Client {
            config,
            phase: Phase::Idle,
            inflight: BTreeMap::new(),
            queued: VecDeque::new(),
            next_id: SUBSCRIBE_ID + 1,
            recent_inbound: VecDeque::new(),
        }
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    pub fn is_ready(&self) -> bool {
        self.phase == Phase::Ready
    }

    pub fn inflight_count(&self) -> usize {
        self.inflight.len()
    }

    pub fn queued_count(&self) -> usize {
        self.queued.len()
    }

    fn connect_packet(&self) -> Packet {
        let mut c = Connect::new(self.config.client_id.clone(), self.config.keep_alive);
        c.clean_session = true;
        Packet::Connect(c)
    }

    fn subscribe_packet(&self) -> Packet {
        Packet::Subscribe {
            packet_id: SUBSCRIBE_ID,
            filters: self.config.subscriptions.clone(),
        }
    }

    /// Called once the transport is up.
    pub fn start(&mut self, now: u64) -> ClientOutput {
        self.phase = Phase::Connecting {
            sent_at: now,
            attempts: 0,
        };
        ClientOutput {
            send: alloc::vec![self.connect_packet()],
            events: Vec::new(),
        }
    }

    fn allocate_id(&mut self) -> u16 {
        loop {
            let id = self.next_id;
            self.next_id = if id == u16::MAX { SUBSCRIBE_ID + 1 } else { id + 1 };
            if !self.inflight.contains_key(&id) {
                return id;
            }
        }
    }

    fn send_publish(&mut self, mut p: Publish, now: u64) -> Packet {
        if p.qos == QoS::AtLeastOnce {
            let id = self.allocate_id();
            p.packet_id = Some(id);
            self.inflight.insert(
                id,
                Inflight {
                    publish: p.clone(),
                    last_sent_at: now,
                    retry_count: 0,
                },
            );
        } else {
            p.packet_id = None;
        }
        Packet::Publish(p)
    }

    /// Queues the publish until the session is ready.
    pub fn publish(&mut self, topic: &str, payload: Vec<u8>, qos: QoS, now: u64) -> ClientOutput {
        let p = Publish {
            topic: topic.into(),
            payload,
            qos,
            packet_id: None,
            dup: false,
        };
        let mut out = ClientOutput::default();
        if self.phase == Phase::Ready {
            out.send.push(self.send_publish(p, now));
        } else {
            self.queued.push_back(p);
        }
        out
    }

    fn become_ready(&mut self, now: u64, out: &mut ClientOutput) {
        self.phase = Phase::Ready;
        while let Some(p) = self.queued.pop_front() {
            let pkt = self.send_publish(p, now);
            out.send.push(pkt);
        }
    }

    pub fn handle(&mut self, packet: Packet, now: u64) -> ClientOutput {
        let mut out = ClientOutput::default();
        match packet {
            Packet::ConnAck(0) => {
                if matches!(self.phase, Phase::Connecting { .. }) {
                    out.events.push(ClientEvent::Connected);
                    if self.config.subscriptions.is_empty() {
                        self.become_ready(now, &mut out);
                    } else {
                        self.phase = Phase::Subscribing {
                            sent_at: now,
                            attempts: 0,
                        };
                        out.send.push(self.subscribe_packet());
                    }
                }
            }
            Packet::ConnAck(_) => {
                self.phase = Phase::Failed;
                out.events.push(ClientEvent::ConnectFailed);
            }
            Packet::SubAck { packet_id, .. } => {
                if packet_id == SUBSCRIBE_ID && matches!(self.phase, Phase::Subscribing { .. }) {
                    out.events.push(ClientEvent::Subscribed);
                    self.become_ready(now, &mut out);
                }
            }
            Packet::PubAck(id) => {
                if self.inflight.remove(&id).is_some() {
                    out.events.push(ClientEvent::Acked(id));
                }
            }
            Packet::Publish(p) => {
                if let (QoS::AtLeastOnce, Some(id)) = (p.qos, p.packet_id) {
                    out.send.push(Packet::PubAck(id));
                    if p.dup && self.recent_inbound.contains(&id) {
                        return out;
                    }
                    self.recent_inbound.retain(|x| *x != id);
                    if self.recent_inbound.len() == RECENT_INBOUND {
                        self.recent_inbound.pop_front();
                    }
                    self.recent_inbound.push_back(id);
                }
                out.events.push(ClientEvent::Message(p));
            }
            Packet::PingReq => out.send.push(Packet::PingResp),
            Packet::PingResp | Packet::Connect(_) | Packet::Subscribe { .. } | Packet::Disconnect => {}
        }
        out
    }

    /// Retransmits the handshake or overdue qos 1 publishes.
    pub fn tick(&mut self, now: u64) -> ClientOutput {
        let mut out = ClientOutput::default();
        let timeout = self.config.retry_timeout_ms;
        match self.phase {
            Phase::Connecting { sent_at, attempts } if now.saturating_sub(sent_at) >= timeout => {
                if attempts >= self.config.max_retries {
                    self.phase = Phase::Failed;
                    out.events.push(ClientEvent::ConnectFailed);
                } else {
                    self.phase = Phase::Connecting {
                        sent_at: now,
                        attempts: attempts + 1,
                    };
                    out.send.push(self.connect_packet());
                }
            }
            Phase::Subscribing { sent_at, attempts } if now.saturating_sub(sent_at) >= timeout => {
                if attempts >= self.config.max_retries {
                    self.phase = Phase::Failed;
                    out.events.push(ClientEvent::ConnectFailed);
                } else {
                    self.phase = Phase::Subscribing {
                        sent_at: now,
                        attempts: attempts + 1,
                    };
                    out.send.push(self.subscribe_packet());
                }
            }
            _ => {}
        }
        let mut gave_up = Vec::new();
        for (id, entry) in self.inflight.iter_mut() {
            if now.saturating_sub(entry.last_sent_at) < timeout {
                continue;
            }
            if entry.retry_count >= self.config.max_retries {
                gave_up.push(*id);
                continue;
            }
            entry.retry_count += 1;
            entry.last_sent_at = now;
            let mut p = entry.publish.clone();
            p.dup = true;
            out.send.push(Packet::Publish(p));
        }
        for id in gave_up {
            if let Some(e) = self.inflight.remove(&id) {
                out.events.push(ClientEvent::GaveUp(e.publish));
            }
        }
        out
    }

    pub fn next_deadline(&self) -> Option<u64> {
        let t = self.config.retry_timeout_ms;
        let handshake = match self.phase {
            Phase::Connecting { sent_at, .. } | Phase::Subscribing { sent_at, .. } => Some(sent_at + t),
            _ => None,
        };
        let inflight = self.inflight.values().map(|e| e.last_sent_at + t).min();
        match (handshake, inflight) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mqtt::codec::SubAckCode;
    use alloc::vec;

    fn ready_client() -> Client {
        let mut cfg = ClientConfig::new("e1");
        cfg.subscriptions.push(("f1/out/edge".into(), QoS::AtLeastOnce));
        let mut c = Client::new(cfg);
        c.start(0);
        let out = c.handle(Packet::ConnAck(0), 1);
        assert!(matches!(out.send[0], Packet::Subscribe { .. }));
        c.handle(
            Packet::SubAck {
                packet_id: SUBSCRIBE_ID,
                codes: vec![SubAckCode::Granted(QoS::AtLeastOnce)],
            },
            2,
        );
        assert!(c.is_ready());
        c
    }

    #[test]
    fn publishes_queue_until_ready() {
        let mut c = Client::new(ClientConfig::new("e1"));
        c.start(0);
        let out = c.publish("f1/in", b"x".to_vec(), QoS::AtLeastOnce, 0);
        assert!(out.send.is_empty());
        assert_eq!(c.queued_count(), 1);
        let out = c.handle(Packet::ConnAck(0), 1);
        assert_eq!(out.send.len(), 1);
        assert_eq!(c.inflight_count(), 1);
    }

    #[test]
    fn qos1_publish_retransmits_until_acked() {
        let mut c = ready_client();
        let out = c.publish("f1/in", b"x".to_vec(), QoS::AtLeastOnce, 10);
        let Packet::Publish(p) = &out.send[0] else { panic!() };
        let id = p.packet_id.unwrap();
        assert!(c.tick(500).send.is_empty());
        let re = c.tick(1010);
        assert!(matches!(&re.send[0], Packet::Publish(p) if p.dup && p.packet_id == Some(id)));
        let acked = c.handle(Packet::PubAck(id), 1020);
        assert_eq!(acked.events, vec![ClientEvent::Acked(id)]);
        assert_eq!(c.next_deadline(), None);
    }

    #[test]
    fn inbound_qos1_is_acked_and_deduplicated() {
        let mut c = ready_client();
        let p = Publish::at_least_once("f1/out/edge", "y", 9);
        let out = c.handle(Packet::Publish(p.clone()), 3);
        assert_eq!(out.send, vec![Packet::PubAck(9)]);
        assert_eq!(out.events.len(), 1);
        let mut dup = p;
        dup.dup = true;
        let out = c.handle(Packet::Publish(dup), 4);
        assert_eq!(out.send, vec![Packet::PubAck(9)]);
        assert!(out.events.is_empty());
    }

    #[test]
    fn connect_is_retried_then_fails() {
        let mut cfg = ClientConfig::new("e1");
        cfg.max_retries = 2;
        let mut c = Client::new(cfg);
        c.start(0);
        assert_eq!(c.tick(1000).send.len(), 1);
        assert_eq!(c.tick(2000).send.len(), 1);
        let out = c.tick(3000);
        assert_eq!(out.events, vec![ClientEvent::ConnectFailed]);
    }
}
