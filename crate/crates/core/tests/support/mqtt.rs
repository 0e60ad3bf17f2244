//! MQTT fixtures shared by the codec and delivery tests: golden byte
//! vectors, packet strategies and a lossy two-client network.
#![allow(dead_code)]

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use atmosphere_core::mqtt::{
    decode_packet, encode_packet, Broker, BrokerAction, BrokerConfig, Client, ClientConfig, ClientEvent, ClientOutput,
    Connect, Packet, Publish, QoS, SubAckCode,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn hex(s: &str) -> Vec<u8> {
    s.split_whitespace()
        .map(|b| u8::from_str_radix(b, 16).unwrap())
        .collect()
}

pub fn golden() -> Vec<(Packet, Vec<u8>)> {
    vec![
        (Packet::PingReq, hex("c0 00")),
        (Packet::PingResp, hex("d0 00")),
        (Packet::Disconnect, hex("e0 00")),
        (
            Packet::Connect(Connect::new("c1", 60)),
            hex("10 0e 00 04 4d 51 54 54 04 02 00 3c 00 02 63 31"),
        ),
        (Packet::ConnAck(0), hex("20 02 00 00")),
        (
            Packet::Publish(Publish::at_most_once("f1/in", b"x".to_vec())),
            hex("30 08 00 05 66 31 2f 69 6e 78"),
        ),
        (
            Packet::Publish(Publish::at_least_once("a/b", b"hi".to_vec(), 10)),
            hex("32 09 00 03 61 2f 62 00 0a 68 69"),
        ),
        (
            Packet::Publish(Publish {
                dup: true,
                ..Publish::at_least_once("a/b", b"hi".to_vec(), 10)
            }),
            hex("3a 09 00 03 61 2f 62 00 0a 68 69"),
        ),
        (Packet::PubAck(10), hex("40 02 00 0a")),
        (
            Packet::Subscribe {
                packet_id: 1,
                filters: vec![("f1/out/edge".into(), QoS::AtLeastOnce)],
            },
            hex("82 10 00 01 00 0b 66 31 2f 6f 75 74 2f 65 64 67 65 01"),
        ),
        (
            Packet::Subscribe {
                packet_id: 7,
                filters: vec![("a/+".into(), QoS::AtMostOnce), ("#".into(), QoS::AtLeastOnce)],
            },
            hex("82 0c 00 07 00 03 61 2f 2b 00 00 01 23 01"),
        ),
        (
            Packet::SubAck {
                packet_id: 1,
                codes: vec![SubAckCode::Granted(QoS::AtLeastOnce), SubAckCode::Failure],
            },
            hex("90 04 00 01 01 80"),
        ),
    ]
}

pub fn level() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9_.-]{1,8}"
}

pub fn topic_name() -> impl Strategy<Value = String> {
    prop::collection::vec(level(), 1..5).prop_map(|v| v.join("/"))
}

pub fn topic_filter() -> impl Strategy<Value = String> {
    let part = prop_oneof![4 => level(), 1 => Just("+".to_string())];
    (prop::collection::vec(part, 1..5), any::<bool>()).prop_map(|(mut v, hash)| {
        if hash {
            v.push("#".into());
        }
        v.join("/")
    })
}

pub fn qos() -> impl Strategy<Value = QoS> {
    prop_oneof![Just(QoS::AtMostOnce), Just(QoS::AtLeastOnce)]
}

pub fn publish() -> impl Strategy<Value = Publish> {
    (
        topic_name(),
        prop::collection::vec(any::<u8>(), 0..400),
        qos(),
        1..=u16::MAX,
        any::<bool>(),
    )
        .prop_map(|(topic, payload, qos, id, dup)| match qos {
            QoS::AtMostOnce => Publish::at_most_once(topic, payload),
            QoS::AtLeastOnce => Publish {
                dup,
                ..Publish::at_least_once(topic, payload, id)
            },
        })
}

pub fn packet() -> impl Strategy<Value = Packet> {
    prop_oneof![
        ("[a-zA-Z0-9-]{0,23}", any::<u16>(), any::<bool>()).prop_map(|(id, ka, clean)| {
            let mut c = Connect::new(id, ka);
            c.clean_session = clean;
            Packet::Connect(c)
        }),
        (0u8..6).prop_map(Packet::ConnAck),
        publish().prop_map(Packet::Publish),
        (1..=u16::MAX).prop_map(Packet::PubAck),
        (1..=u16::MAX, prop::collection::vec((topic_filter(), qos()), 1..4))
            .prop_map(|(packet_id, filters)| Packet::Subscribe { packet_id, filters }),
        (
            1..=u16::MAX,
            prop::collection::vec(
                prop_oneof![qos().prop_map(SubAckCode::Granted), Just(SubAckCode::Failure)],
                1..4
            )
        )
            .prop_map(|(packet_id, codes)| Packet::SubAck { packet_id, codes }),
        Just(Packet::PingReq),
        Just(Packet::PingResp),
        Just(Packet::Disconnect),
    ]
}

/// Two clients and a broker joined by links that drop each packet with a
/// fixed probability. Packets travel through the codec.
pub struct LossyNet {
    pub rng: ChaCha8Rng,
    pub loss: f64,
    pub latency: u64,
    pub now: u64,
    pub seq: u64,
    pub queue: BinaryHeap<Reverse<InFlight>>,
    pub broker: Broker,
    pub publisher: Client,
    pub subscriber: Client,
    /// PUBLISH packets put on the wire, by hop and qos.
    pub sent: BTreeMap<(Hop, u8), u64>,
    pub dup_qos0: u64,
    /// First arrival time of each payload at the broker and at the subscriber.
    pub at_broker: BTreeMap<Vec<u8>, u64>,
    pub delivered: BTreeMap<Vec<u8>, u64>,
    pub gave_up: u64,
    pub closed: u64,
}

/// Arrival time, sequence number, hop and encoded packet.
type InFlight = (u64, u64, Hop, Vec<u8>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Hop {
    PubToBroker,
    BrokerToPub,
    SubToBroker,
    BrokerToSub,
}

pub const PUB: u64 = 1;
pub const SUB: u64 = 2;

impl LossyNet {
    pub fn new(seed: u64, loss: f64, timeout: u64, retries: u32) -> Self {
        let mut pc = ClientConfig::new("pub");
        pc.retry_timeout_ms = timeout;
        pc.max_retries = retries;
        let mut sc = ClientConfig::new("sub");
        sc.retry_timeout_ms = timeout;
        sc.max_retries = retries;
        sc.subscriptions = vec![("data/#".into(), QoS::AtLeastOnce)];
        let mut broker = Broker::new(BrokerConfig {
            retry_timeout_ms: timeout,
            max_retries: retries,
        });
        broker.open(PUB);
        broker.open(SUB);
        LossyNet {
            rng: ChaCha8Rng::seed_from_u64(seed),
            loss,
            latency: 2,
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            broker,
            publisher: Client::new(pc),
            subscriber: Client::new(sc),
            sent: BTreeMap::new(),
            dup_qos0: 0,
            at_broker: BTreeMap::new(),
            delivered: BTreeMap::new(),
            gave_up: 0,
            closed: 0,
        }
    }

    pub fn send(&mut self, hop: Hop, p: &Packet) {
        if let Packet::Publish(p) = p {
            *self.sent.entry((hop, p.qos as u8)).or_default() += 1;
            if p.qos == QoS::AtMostOnce && p.dup {
                self.dup_qos0 += 1;
            }
        }
        if self.rng.gen_bool(self.loss) {
            return;
        }
        self.seq += 1;
        let bytes = encode_packet(p).unwrap();
        self.queue
            .push(Reverse((self.now + self.latency, self.seq, hop, bytes)));
    }

    pub fn client_out(&mut self, hop: Hop, o: ClientOutput) {
        for p in &o.send {
            self.send(hop, p);
        }
        for e in o.events {
            match e {
                ClientEvent::Message(p) => {
                    self.delivered.entry(p.payload).or_insert(self.now);
                }
                ClientEvent::GaveUp(_) | ClientEvent::ConnectFailed => self.gave_up += 1,
                _ => {}
            }
        }
    }

    pub fn broker_out(&mut self, actions: Vec<BrokerAction>) {
        for a in actions {
            match a {
                BrokerAction::Send(PUB, p) => self.send(Hop::BrokerToPub, &p),
                BrokerAction::Send(_, p) => self.send(Hop::BrokerToSub, &p),
                BrokerAction::Close(_) => self.closed += 1,
            }
        }
    }

    pub fn start(&mut self) {
        let o = self.publisher.start(0);
        self.client_out(Hop::PubToBroker, o);
        let o = self.subscriber.start(0);
        self.client_out(Hop::SubToBroker, o);
    }

    pub fn next_time(&self) -> Option<u64> {
        [
            self.queue.peek().map(|Reverse((t, ..))| *t),
            self.broker.next_deadline(),
            self.publisher.next_deadline(),
            self.subscriber.next_deadline(),
        ]
        .into_iter()
        .flatten()
        .min()
    }

    /// Processes everything due up to and including `until`.
    pub fn run_until(&mut self, until: u64) {
        while let Some(t) = self.next_time().filter(|t| *t <= until) {
            self.now = self.now.max(t);
            while let Some(Reverse((at, ..))) = self.queue.peek() {
                if *at > self.now {
                    break;
                }
                let Reverse((_, _, hop, bytes)) = self.queue.pop().unwrap();
                let (pkt, n) = decode_packet(&bytes).unwrap().unwrap();
                assert_eq!(n, bytes.len());
                let now = self.now;
                match hop {
                    Hop::PubToBroker | Hop::SubToBroker => {
                        let conn = if hop == Hop::PubToBroker { PUB } else { SUB };
                        if let Packet::Publish(p) = &pkt {
                            self.at_broker.entry(p.payload.clone()).or_insert(now);
                        }
                        let a = self.broker.handle(conn, pkt, now);
                        self.broker_out(a);
                    }
                    Hop::BrokerToPub => {
                        let o = self.publisher.handle(pkt, now);
                        self.client_out(Hop::PubToBroker, o);
                    }
                    Hop::BrokerToSub => {
                        let o = self.subscriber.handle(pkt, now);
                        self.client_out(Hop::SubToBroker, o);
                    }
                }
            }
            let now = self.now;
            let a = self.broker.retransmit_tick(now);
            self.broker_out(a);
            let o = self.publisher.tick(now);
            self.client_out(Hop::PubToBroker, o);
            let o = self.subscriber.tick(now);
            self.client_out(Hop::SubToBroker, o);
        }
        self.now = self.now.max(until);
    }

    pub fn publish(&mut self, payload: Vec<u8>, qos: QoS) {
        let o = self.publisher.publish("data/x", payload, qos, self.now);
        self.client_out(Hop::PubToBroker, o);
    }
}

pub fn connected(seed: u64, loss: f64, timeout: u64, retries: u32) -> LossyNet {
    let mut net = LossyNet::new(seed, loss, timeout, retries);
    net.start();
    let mut t = 0;
    while !(net.publisher.is_ready() && net.subscriber.is_ready()) {
        t += timeout;
        assert!(t < timeout * 100, "handshake did not finish");
        net.run_until(t);
    }
    net
}
