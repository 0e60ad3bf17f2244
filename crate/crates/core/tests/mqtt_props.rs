use std::collections::BTreeMap;

use atmosphere_core::mqtt::{
    decode_packet, encode_packet, match_topic, valid_filter, valid_topic_name, Packet, Publish, QoS,
};
use proptest::prelude::*;

#[path = "support/mqtt.rs"]
mod support;

use support::{connected, golden, hex, packet, Hop};

#[test]
fn golden_vectors_encode() {
    for (p, bytes) in golden() {
        assert_eq!(encode_packet(&p).unwrap(), bytes, "{p:?}");
    }
}

#[test]
fn golden_vectors_decode() {
    for (p, bytes) in golden() {
        assert_eq!(decode_packet(&bytes).unwrap(), Some((p, bytes.len())));
    }
}

#[test]
fn two_byte_remaining_length() {
    let p = Packet::Publish(Publish::at_most_once("t", vec![0xAA; 200]));
    let bytes = encode_packet(&p).unwrap();
    // 2 + 1 + 200 = 203 = 0xCB -> 0xCB 0x01
    assert_eq!(&bytes[..5], &hex("30 cb 01 00 01")[..]);
    assert_eq!(bytes.len(), 3 + 203);
    assert_eq!(decode_packet(&bytes).unwrap(), Some((p, bytes.len())));
}

#[test]
fn concatenated_packets_decode_one_at_a_time() {
    let mut stream = Vec::new();
    for (_, b) in golden() {
        stream.extend(b);
    }
    let mut seen = Vec::new();
    let mut rest = &stream[..];
    while let Some((p, n)) = decode_packet(rest).unwrap() {
        seen.push(p);
        rest = &rest[n..];
    }
    assert!(rest.is_empty());
    assert_eq!(seen, golden().into_iter().map(|(p, _)| p).collect::<Vec<_>>());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn codec_round_trip(p in packet()) {
        let bytes = encode_packet(&p).unwrap();
        prop_assert_eq!(decode_packet(&bytes).unwrap(), Some((p, bytes.len())));
        // Every strict prefix asks for more input.
        for cut in [0, 1, bytes.len() / 2, bytes.len() - 1] {
            prop_assert_eq!(decode_packet(&bytes[..cut]).unwrap(), None);
        }
    }

    #[test]
    fn decoder_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        let _ = decode_packet(&bytes);
    }
}

#[test]
fn qos1_survives_thirty_percent_loss() {
    const TIMEOUT: u64 = 100;
    const RETRIES: u32 = 20;
    let mut net = connected(7, 0.3, TIMEOUT, RETRIES);
    let mut published = BTreeMap::new();
    for i in 0..1000u32 {
        let payload = i.to_be_bytes().to_vec();
        published.insert(payload.clone(), net.now);
        net.publish(payload, QoS::AtLeastOnce);
        let next = net.now + 5;
        net.run_until(next);
    }
    let end = net.now + 2 * (RETRIES as u64 + 1) * TIMEOUT;
    net.run_until(end);

    assert_eq!(net.gave_up, 0);
    assert_eq!(net.closed, 0);
    assert_eq!(net.delivered.len(), 1000, "every publish delivered at least once");
    // Each hop completes within max_retries retransmissions.
    let hop_bound = RETRIES as u64 * TIMEOUT + net.latency;
    for (payload, t0) in &published {
        let at_broker = net.at_broker[payload];
        let at_sub = net.delivered[payload];
        assert!(at_broker - t0 <= hop_bound, "publisher hop took {}", at_broker - t0);
        assert!(
            at_sub - at_broker <= hop_bound,
            "broker hop took {}",
            at_sub - at_broker
        );
    }
    // Loss actually forced retransmissions on both hops.
    assert!(net.sent[&(Hop::PubToBroker, 1)] > 1200);
    assert!(net.sent[&(Hop::BrokerToSub, 1)] > 1200);
    assert_eq!(net.publisher.inflight_count(), 0);
    assert_eq!(net.broker.inflight_count(), 0);
}

#[test]
fn qos0_is_never_retransmitted() {
    let mut net = connected(11, 0.3, 100, 5);
    for i in 0..1000u32 {
        net.publish(i.to_be_bytes().to_vec(), QoS::AtMostOnce);
        let next = net.now + 5;
        net.run_until(next);
    }
    let end = net.now + 10_000;
    net.run_until(end);
    assert_eq!(net.sent[&(Hop::PubToBroker, 0)], 1000);
    let reached_broker = net.at_broker.len() as u64;
    assert_eq!(net.sent[&(Hop::BrokerToSub, 0)], reached_broker);
    assert_eq!(net.dup_qos0, 0);
    assert!(reached_broker < 1000, "loss model dropped nothing");
    assert!(net.delivered.len() as u64 <= reached_broker);
    assert_eq!(net.publisher.next_deadline(), None);
    assert_eq!(net.broker.next_deadline(), None);
}

#[test]
fn lossless_link_needs_no_retransmission() {
    let mut net = connected(3, 0.0, 100, 5);
    for i in 0..50u32 {
        net.publish(i.to_be_bytes().to_vec(), QoS::AtLeastOnce);
    }
    net.run_until(net.now + 1000);
    assert_eq!(net.delivered.len(), 50);
    assert_eq!(net.sent[&(Hop::PubToBroker, 1)], 50);
    assert_eq!(net.sent[&(Hop::BrokerToSub, 1)], 50);
}

/// Reference matcher over whole level lists.
fn matches_levels(filter: &[&str], name: &[&str]) -> bool {
    match (filter.split_first(), name.split_first()) {
        (Some((&"#", _)), _) => true,
        (None, None) => true,
        (Some((f, fs)), Some((n, ns))) => (*f == "+" || f == n) && matches_levels(fs, ns),
        _ => false,
    }
}

fn small_level() -> impl Strategy<Value = String> {
    prop_oneof![Just("a".to_string()), Just("b".to_string()), Just("".to_string())]
}

proptest! {
    #[test]
    fn filter_masked_from_a_name_matches_it(
        levels in prop::collection::vec("[a-z0-9]{1,4}", 1..6),
        mask in prop::collection::vec(any::<bool>(), 6),
        cut in 0usize..7,
    ) {
        let name = levels.join("/");
        prop_assert!(valid_topic_name(&name));
        let mut filter: Vec<&str> = levels
            .iter()
            .zip(&mask)
            .map(|(l, plus)| if *plus { "+" } else { l.as_str() })
            .collect();
        if cut <= filter.len() {
            filter.truncate(cut);
            filter.push("#");
        }
        let filter = filter.join("/");
        prop_assert!(valid_filter(&filter));
        prop_assert!(match_topic(&filter, &name), "{filter} vs {name}");
    }

    #[test]
    fn matching_agrees_with_level_reference(
        name in prop::collection::vec(small_level(), 1..5),
        filter in prop::collection::vec(
            prop_oneof![3 => small_level(), 1 => Just("+".to_string())], 1..5),
        hash in any::<bool>(),
    ) {
        let mut filter = filter;
        if hash {
            filter.push("#".into());
        }
        let (name, filter) = (name.join("/"), filter.join("/"));
        let n: Vec<&str> = name.split('/').collect();
        let f: Vec<&str> = filter.split('/').collect();
        prop_assert_eq!(match_topic(&filter, &name), matches_levels(&f, &n), "{} vs {}", filter, name);
    }
}
