//! Types shared by the simulated and the live runtime.

use atmosphere_core::agent::frame;
use atmosphere_core::event::{encode_event_untyped, Event, NodeRole};
use atmosphere_core::mqtt::encode_packet;
use atmosphere_core::node::{GatewayFrame, LinkKind, NodeOutput, NodeStats, Record};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

/// A record with the time and node it was produced at.
#[derive(Debug, Clone, PartialEq)]
pub struct Stamped {
    /// Microseconds since the start of the run.
    pub t_us: u64,
    pub node: String,
    pub record: Record,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSummary {
    pub id: String,
    pub role: NodeRole,
    pub stats: NodeStats,
    pub in_flight: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpuSample {
    pub t_ms: u64,
    pub node: String,
    pub cpu_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Connection {
    pub from: String,
    pub to: String,
    pub kind: LinkKind,
}

#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub records: Vec<Stamped>,
    pub nodes: Vec<NodeSummary>,
    pub cpu: Vec<CpuSample>,
    pub connections: Vec<Connection>,
    /// Stimuli actually handed to nodes; less than the schedule when a run
    /// is abandoned.
    pub stimuli_sent: usize,
    pub saturated: bool,
    /// Run length from the first stimulus to shutdown.
    pub elapsed_us: u64,
}

/// Whether a record belongs in the alert log.
pub fn is_alert(r: &Record) -> bool {
    !matches!(
        r,
        Record::ProbeSent { .. }
            | Record::ProbeReceived { .. }
            | Record::ProbeLost { .. }
            | Record::Connected { .. }
            | Record::Emission { .. }
    )
}

pub fn event_json(e: &Event) -> Value {
    serde_json::from_slice(&encode_event_untyped(e)).expect("events encode as JSON")
}

/// One JSON object per record, with the time in milliseconds.
pub fn record_json(s: &Stamped) -> Value {
    let t_ms = s.t_us / 1000;
    let node = &s.node;
    match &s.record {
        Record::ProbeSent { id } => json!({"t_ms": t_ms, "node": node, "kind": "probe_sent", "id": id}),
        Record::ProbeReceived { id } => json!({"t_ms": t_ms, "node": node, "kind": "probe_received", "id": id}),
        Record::ProbeLost { id } => json!({"t_ms": t_ms, "node": node, "kind": "probe_lost", "id": id}),
        Record::Actuation { agent, actuator, value } => json!({
            "t_ms": t_ms, "node": node, "kind": "actuation",
            "agent": agent, "actuator": actuator, "value": value.to_json(),
        }),
        Record::AgentLog { agent, line } => {
            json!({"t_ms": t_ms, "node": node, "kind": "log", "agent": agent, "line": line})
        }
        Record::RuleError { agent, rule, message } => json!({
            "t_ms": t_ms, "node": node, "kind": "rule_error", "agent": agent, "rule": rule, "message": message,
        }),
        Record::RuleReplaced { agent, rule } => {
            json!({"t_ms": t_ms, "node": node, "kind": "rule_replaced", "agent": agent, "rule": rule})
        }
        Record::FogPublish { agent, topic, event } => json!({
            "t_ms": t_ms, "node": node, "kind": "fog_publish", "agent": agent, "topic": topic, "event": event_json(event),
        }),
        Record::Emission { pattern, topic, event } => json!({
            "t_ms": t_ms, "node": node, "kind": "emission", "pattern": pattern, "topic": topic, "event": event_json(event),
        }),
        Record::Notification { sink, event } => json!({
            "t_ms": t_ms, "node": node, "kind": "notification", "sink": sink, "event": event_json(event),
        }),
        Record::Received { topic, event } => json!({
            "t_ms": t_ms, "node": node, "kind": "received", "topic": topic, "event": event_json(event),
        }),
        Record::DeadLetter { reason, payload } => json!({
            "t_ms": t_ms, "node": node, "kind": "dead_letter", "reason": reason, "payload": payload,
        }),
        Record::LinkFailed { link, reason } => {
            json!({"t_ms": t_ms, "node": node, "kind": "link_failed", "link": link, "reason": reason})
        }
        Record::Connected { link } => json!({"t_ms": t_ms, "node": node, "kind": "connected", "link": link}),
    }
}

/// Wire bytes of an outbound message; `None` for non-network outputs.
pub fn wire_bytes(o: &NodeOutput) -> Option<Vec<u8>> {
    match o {
        NodeOutput::Mqtt(_, p) => Some(encode_packet(p).expect("nodes emit encodable packets")),
        NodeOutput::Gateway(_, f) => Some(frame(&f.encode())),
        NodeOutput::Close(_) | NodeOutput::Record(_) => None,
    }
}

pub fn decode_gateway(payload: &[u8]) -> Option<GatewayFrame> {
    GatewayFrame::decode(payload).ok()
}
