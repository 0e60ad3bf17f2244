//! Broker core: sessions, the subscription table and QoS 0/1 delivery.
//!
//! The broker is a pure state machine. Transports feed it packets tagged with
//! a connection id and carry out the returned [`BrokerAction`]s.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::string::String;
use alloc::vec::Vec;

use super::codec::{Packet, Publish, QoS, SubAckCode};
use super::topic::{match_topic, valid_filter, valid_topic_name};

pub type ConnId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BrokerConfig {
    pub retry_timeout_ms: u64,
    pub max_retries: u32,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        BrokerConfig {
            retry_timeout_ms: 1000,
            max_retries: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BrokerAction {
    Send(ConnId, Packet),
    Close(ConnId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inflight {
    pub publish: Publish,
    pub last_sent_at: u64,
    pub retry_count: u32,
}

/// Outcome of checking one session for overdue acknowledgements.
#[derive(Debug, Default, PartialEq, Eq)]
pub struct Retransmit {
    pub resend: Vec<Publish>,
    pub drop_session: bool,
}

const RECENT_INBOUND: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub client_id: String,
    pub subscriptions: Vec<(String, QoS)>,
    pub inflight: BTreeMap<u16, Inflight>,
    next_id: u16,
    recent_inbound: VecDeque<u16>,
}

impl Session {
    pub fn new(client_id: impl Into<String>) -> Self {
        Session {
            client_id: client_id.into(),
            subscriptions: Vec::new(),
            inflight: BTreeMap::new(),
            next_id: 1,
            recent_inbound: VecDeque::new(),
        }
    }

    /// Next packet id in 1..=65535 not currently awaiting acknowledgement.
    fn allocate_id(&mut self) -> Option<u16> {
        if self.inflight.len() >= u16::MAX as usize {
            return None;
        }
        loop {
            let id = self.next_id;
            self.next_id = if id == u16::MAX { 1 } else { id + 1 };
            if !self.inflight.contains_key(&id) {
                return Some(id);
            }
        }
    }

    /// Returns true if this qos 1 packet id was seen before and the packet
    /// is flagged as a redelivery.
    fn note_inbound(&mut self, id: u16, dup: bool) -> bool {
        if dup && self.recent_inbound.contains(&id) {
            return true;
        }
        self.recent_inbound.retain(|x| *x != id);
        if self.recent_inbound.len() == RECENT_INBOUND {
            self.recent_inbound.pop_front();
        }
        self.recent_inbound.push_back(id);
        false
    }

    /// Re-sends every inflight publish whose last transmission is at least
    /// `retry_timeout_ms` old. An entry that already used `max_retries`
    /// retransmissions drops the session instead.
    pub fn retransmit_due(&mut self, now: u64, config: &BrokerConfig) -> Retransmit {
        let mut out = Retransmit::default();
        for entry in self.inflight.values_mut() {
            if now.saturating_sub(entry.last_sent_at) < config.retry_timeout_ms {
                continue;
            }
            if entry.retry_count >= config.max_retries {
                out.drop_session = true;
                out.resend.clear();
                return out;
            }
            entry.retry_count += 1;
            entry.last_sent_at = now;
            let mut p = entry.publish.clone();
            p.dup = true;
            out.resend.push(p);
        }
        out
    }

    fn next_deadline(&self, config: &BrokerConfig) -> Option<u64> {
        self.inflight
            .values()
            .map(|e| e.last_sent_at + config.retry_timeout_ms)
            .min()
    }
}

#[derive(Debug)]
enum ConnState {
    AwaitingConnect,
    Connected(Session),
}

/// Filter → subscribed connections with their granted qos.
#[derive(Debug, Default)]
pub struct SubscriptionTable {
    filters: BTreeMap<String, BTreeMap<ConnId, QoS>>,
}

impl SubscriptionTable {
    pub fn insert(&mut self, filter: &str, conn: ConnId, qos: QoS) {
        self.filters.entry(filter.into()).or_default().insert(conn, qos);
    }

    pub fn remove_conn(&mut self, conn: ConnId) {
        self.filters.retain(|_, subs| {
            subs.remove(&conn);
            !subs.is_empty()
        });
    }

    /// Union over all matching filters; one entry per connection carrying the
    /// highest qos among its matching filters.
    pub fn matches(&self, topic: &str) -> BTreeMap<ConnId, QoS> {
        let mut out: BTreeMap<ConnId, QoS> = BTreeMap::new();
        for (filter, subs) in &self.filters {
            if !match_topic(filter, topic) {
                continue;
            }
            for (conn, qos) in subs {
                let slot = out.entry(*conn).or_insert(*qos);
                if *qos > *slot {
                    *slot = *qos;
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }
}

#[derive(Debug, Default)]
pub struct Broker {
    config: BrokerConfig,
    conns: BTreeMap<ConnId, ConnState>,
    table: SubscriptionTable,
}

impl Broker {
    pub fn new(config: BrokerConfig) -> Self {
        Broker {
            config,
            conns: BTreeMap::new(),
            table: SubscriptionTable::default(),
        }
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.config
    }

    pub fn open(&mut self, conn: ConnId) {
        self.conns.insert(conn, ConnState::AwaitingConnect);
    }

    pub fn closed(&mut self, conn: ConnId) {
        self.conns.remove(&conn);
        self.table.remove_conn(conn);
    }

    pub fn session(&self, conn: ConnId) -> Option<&Session> {
        match self.conns.get(&conn) {
            Some(ConnState::Connected(s)) => Some(s),
            _ => None,
        }
    }

    pub fn is_connected(&self, conn: ConnId) -> bool {
        self.session(conn).is_some()
    }

    pub fn inflight_count(&self) -> usize {
        self.conns
            .values()
            .map(|c| match c {
                ConnState::Connected(s) => s.inflight.len(),
                ConnState::AwaitingConnect => 0,
            })
            .sum()
    }

    pub fn handle(&mut self, conn: ConnId, packet: Packet, now: u64) -> Vec<BrokerAction> {
        let connected = matches!(self.conns.get(&conn), Some(ConnState::Connected(_)));
        match packet {
            Packet::Connect(c) => {
                // A repeated CONNECT from the same client means our CONNACK
                // was lost; acknowledge again and keep the session.
                if let Some(ConnState::Connected(s)) = self.conns.get(&conn) {
                    if s.client_id == c.client_id {
                        return alloc::vec![BrokerAction::Send(conn, Packet::ConnAck(0))];
                    }
                }
                if connected || !self.conns.contains_key(&conn) {
                    return self.drop_conn(conn);
                }
                let mut out = Vec::new();
                let stale: Vec<ConnId> = self
                    .conns
                    .iter()
                    .filter(|(id, st)| {
                        **id != conn && matches!(st, ConnState::Connected(s) if s.client_id == c.client_id)
                    })
                    .map(|(id, _)| *id)
                    .collect();
                for id in stale {
                    out.extend(self.drop_conn(id));
                }
                self.conns.insert(conn, ConnState::Connected(Session::new(c.client_id)));
                out.push(BrokerAction::Send(conn, Packet::ConnAck(0)));
                out
            }
            _ if !connected => self.drop_conn(conn),
            Packet::Publish(p) => self.handle_publish(conn, p, now),
            Packet::PubAck(id) => {
                if let Some(ConnState::Connected(s)) = self.conns.get_mut(&conn) {
                    s.inflight.remove(&id);
                }
                Vec::new()
            }
            Packet::Subscribe { packet_id, filters } => {
                let mut codes = Vec::with_capacity(filters.len());
                for (f, q) in &filters {
                    if valid_filter(f) {
                        self.table.insert(f, conn, *q);
                        if let Some(ConnState::Connected(s)) = self.conns.get_mut(&conn) {
                            s.subscriptions.retain(|(x, _)| x != f);
                            s.subscriptions.push((f.clone(), *q));
                        }
                        codes.push(SubAckCode::Granted(*q));
                    } else {
                        codes.push(SubAckCode::Failure);
                    }
                }
                alloc::vec![BrokerAction::Send(conn, Packet::SubAck { packet_id, codes })]
            }
            Packet::PingReq => alloc::vec![BrokerAction::Send(conn, Packet::PingResp)],
            Packet::Disconnect => {
                self.closed(conn);
                alloc::vec![BrokerAction::Close(conn)]
            }
            Packet::ConnAck(_) | Packet::SubAck { .. } | Packet::PingResp => self.drop_conn(conn),
        }
    }

    /// Acknowledges a qos 1 publish and forwards it to every matching
    /// subscriber at `min(publish qos, granted qos)`.
    pub fn handle_publish(&mut self, conn: ConnId, p: Publish, now: u64) -> Vec<BrokerAction> {
        if !valid_topic_name(&p.topic) {
            return self.drop_conn(conn);
        }
        let mut out = Vec::new();
        if p.qos == QoS::AtLeastOnce {
            let Some(id) = p.packet_id else {
                return self.drop_conn(conn);
            };
            out.push(BrokerAction::Send(conn, Packet::PubAck(id)));
            let duplicate = match self.conns.get_mut(&conn) {
                Some(ConnState::Connected(s)) => s.note_inbound(id, p.dup),
                _ => false,
            };
            if duplicate {
                return out;
            }
        }
        for (target, granted) in self.table.matches(&p.topic) {
            let Some(ConnState::Connected(session)) = self.conns.get_mut(&target) else {
                continue;
            };
            let qos = p.qos.min(granted);
            let forward = match qos {
                QoS::AtMostOnce => Publish::at_most_once(p.topic.clone(), p.payload.clone()),
                QoS::AtLeastOnce => {
                    let Some(id) = session.allocate_id() else {
                        continue;
                    };
                    let fwd = Publish::at_least_once(p.topic.clone(), p.payload.clone(), id);
                    session.inflight.insert(
                        id,
                        Inflight {
                            publish: fwd.clone(),
                            last_sent_at: now,
                            retry_count: 0,
                        },
                    );
                    fwd
                }
            };
            out.push(BrokerAction::Send(target, Packet::Publish(forward)));
        }
        out
    }

    /// Retransmits overdue qos 1 deliveries and drops sessions that ran out
    /// of retries.
    pub fn retransmit_tick(&mut self, now: u64) -> Vec<BrokerAction> {
        let config = self.config;
        let mut out = Vec::new();
        let mut dropped = Vec::new();
        for (conn, st) in self.conns.iter_mut() {
            let ConnState::Connected(s) = st else { continue };
            let r = s.retransmit_due(now, &config);
            if r.drop_session {
                dropped.push(*conn);
            } else {
                out.extend(
                    r.resend
                        .into_iter()
                        .map(|p| BrokerAction::Send(*conn, Packet::Publish(p))),
                );
            }
        }
        for conn in dropped {
            out.extend(self.drop_conn(conn));
        }
        out
    }

    pub fn next_deadline(&self) -> Option<u64> {
        self.conns
            .values()
            .filter_map(|c| match c {
                ConnState::Connected(s) => s.next_deadline(&self.config),
                ConnState::AwaitingConnect => None,
            })
            .min()
    }

    fn drop_conn(&mut self, conn: ConnId) -> Vec<BrokerAction> {
        self.closed(conn);
        alloc::vec![BrokerAction::Close(conn)]
    }
}
