//! MQTT 3.1.1 subset: QoS 0/1 publish/subscribe without retained messages,
//! wills or persistent sessions.

pub mod broker;
pub mod client;
pub mod codec;
pub mod topic;

pub use broker::{Broker, BrokerAction, BrokerConfig, ConnId, Inflight, Retransmit, Session, SubscriptionTable};
pub use client::{Client, ClientConfig, ClientEvent, ClientOutput};
pub use codec::{
    decode_packet, decode_remaining_length, encode_packet, encode_remaining_length, CodecError, Connect, Packet,
    Publish, QoS, SubAckCode,
};
pub use topic::{match_topic, valid_filter, valid_topic_name};
