//! Cloud node: normalizes heterogeneous source data into events, runs its
//! own engine and dispatches emissions to sinks.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::{stamp, Dial, LinkId, LinkKind, Node, NodeInput, NodeOutput, NodeStats, Record};
use crate::cep::{CepError, ClockMode, Engine};
use crate::event::{
    decode_event, encode_event, Event, FieldValue, Fields, NodeId, NodeRole, SchemaRegistry, StreamName, Timestamp,
};
use crate::mqtt::{match_topic, Client, ClientConfig, ClientEvent, ClientOutput, QoS};
use crate::pattern::PatternDef;

/// Transformer id for payloads that are already encoded events.
pub const EVENT_TRANSFORMER: &str = "event";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldMapping {
    /// Dot-separated path into the source document; numeric segments index
    /// arrays.
    pub from: String,
    pub to: String,
    /// Used when the path is absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerSpec {
    pub id: String,
    pub stream: String,
    pub fields: Vec<FieldMapping>,
    /// Path of a millisecond timestamp; the arrival time is used otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    /// Topic filter.
    pub topic: String,
    pub transformer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SinkKind {
    /// Publish on a topic of every connected fog broker, or only `via`.
    Topic {
        topic: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        via: Option<String>,
    },
    /// Append to the notification log.
    Notification,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinkSpec {
    pub id: String,
    pub target: NodeRole,
    pub kind: SinkKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransformError {
    #[error("transformer {transformer}: payload is not JSON: {message}")]
    NotJson { transformer: String, message: String },
    #[error("transformer {transformer}: missing path {path:?}")]
    MissingPath { transformer: String, path: String },
    #[error("transformer {transformer}: path {path:?} does not hold a scalar")]
    NotScalar { transformer: String, path: String },
    #[error("transformer {transformer}: {message}")]
    Invalid { transformer: String, message: String },
}

fn lookup<'a>(doc: &'a Value, path: &str) -> Option<&'a Value> {
    let mut v = doc;
    for seg in path.split('.') {
        v = match v {
            Value::Object(m) => m.get(seg)?,
            Value::Array(a) => a.get(seg.parse::<usize>().ok()?)?,
            _ => return None,
        };
    }
    Some(v)
}

impl TransformerSpec {
    /// Maps a raw JSON document onto an event of the output stream.
    pub fn apply(&self, payload: &[u8], now: Timestamp, source: &NodeId) -> Result<Event, TransformError> {
        let doc: Value = serde_json::from_slice(payload).map_err(|e| TransformError::NotJson {
            transformer: self.id.clone(),
            message: e.to_string(),
        })?;
        let mut fields = Fields::new();
        for m in &self.fields {
            let v = match (lookup(&doc, &m.from), &m.default) {
                (Some(v), _) => v,
                (None, Some(d)) => d,
                (None, None) => {
                    return Err(TransformError::MissingPath {
                        transformer: self.id.clone(),
                        path: m.from.clone(),
                    })
                }
            };
            let fv = FieldValue::from_json(v).ok_or_else(|| TransformError::NotScalar {
                transformer: self.id.clone(),
                path: m.from.clone(),
            })?;
            fields.set(m.to.clone(), fv);
        }
        let timestamp = match &self.timestamp {
            None => now,
            Some(p) => lookup(&doc, p)
                .and_then(Value::as_u64)
                .ok_or_else(|| TransformError::MissingPath {
                    transformer: self.id.clone(),
                    path: p.clone(),
                })?,
        };
        let stream = StreamName::new(self.stream.as_str()).map_err(|e| TransformError::Invalid {
            transformer: self.id.clone(),
            message: e.to_string(),
        })?;
        Ok(Event::new(stream, fields, timestamp, source.clone()))
    }
}

#[derive(Debug, Clone)]
pub struct CloudConfig {
    pub id: NodeId,
    /// Fog brokers this node holds a session with.
    pub fogs: Vec<NodeId>,
    pub sources: Vec<SourceSpec>,
    pub transformers: Vec<TransformerSpec>,
    pub patterns: Vec<PatternDef>,
    pub sinks: Vec<SinkSpec>,
    pub schemas: SchemaRegistry,
    pub clock: ClockMode,
    pub qos: QoS,
    pub retry_timeout_ms: u64,
    pub max_retries: u32,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CloudError {
    #[error(transparent)]
    Cep(#[from] CepError),
    #[error("source {topic:?} uses unknown transformer {transformer:?}")]
    UnknownTransformer { topic: String, transformer: String },
    #[error("transformer {0:?} writes an unregistered stream")]
    UnregisteredStream(String),
    #[error("pattern {pattern:?} targets {target:?}, which has no sink")]
    NoSink { pattern: String, target: String },
    #[error("more than one sink for target {0:?}")]
    DuplicateSink(String),
    #[error("sink {sink:?} publishes via unknown fog {fog:?}")]
    UnknownFog { sink: String, fog: String },
}

pub struct CloudNode {
    config: CloudConfig,
    engine: Engine,
    clients: BTreeMap<LinkId, Client>,
    sinks: BTreeMap<NodeRole, SinkSpec>,
    stats: NodeStats,
}

impl CloudNode {
    pub fn new(config: CloudConfig) -> Result<CloudNode, CloudError> {
        for s in &config.sources {
            if s.transformer != EVENT_TRANSFORMER && !config.transformers.iter().any(|t| t.id == s.transformer) {
                return Err(CloudError::UnknownTransformer {
                    topic: s.topic.clone(),
                    transformer: s.transformer.clone(),
                });
            }
        }
        for t in &config.transformers {
            if config.schemas.get_str(&t.stream).is_none() {
                return Err(CloudError::UnregisteredStream(t.id.clone()));
            }
        }
        let mut sinks = BTreeMap::new();
        for s in &config.sinks {
            if let SinkKind::Topic { via: Some(f), .. } = &s.kind {
                if !config.fogs.iter().any(|x| x.as_str() == f) {
                    return Err(CloudError::UnknownFog {
                        sink: s.id.clone(),
                        fog: f.clone(),
                    });
                }
            }
            if sinks.insert(s.target, s.clone()).is_some() {
                return Err(CloudError::DuplicateSink(format!("{:?}", s.target)));
            }
        }
        let mut engine = Engine::new(config.schemas.clone(), config.clock, 0).with_source(config.id.clone());
        engine.deploy_all(config.patterns.iter().cloned())?;
        for p in &config.patterns {
            let target = p.target().unwrap_or(NodeRole::Fog);
            if !sinks.contains_key(&target) {
                return Err(CloudError::NoSink {
                    pattern: p.name.clone(),
                    target: format!("{target:?}").to_lowercase(),
                });
            }
        }
        let clients = config
            .fogs
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let mut c = ClientConfig::new(format!("{}@{}", config.id, f));
                c.subscriptions = config.sources.iter().map(|s| (s.topic.clone(), config.qos)).collect();
                c.retry_timeout_ms = config.retry_timeout_ms;
                c.max_retries = config.max_retries;
                (i as LinkId, Client::new(c))
            })
            .collect();
        Ok(CloudNode {
            engine,
            clients,
            sinks,
            stats: NodeStats::default(),
            config,
        })
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    fn dead_letter(&mut self, reason: String, payload: &[u8], out: &mut Vec<NodeOutput>) {
        self.stats.dead_letters += 1;
        out.push(NodeOutput::Record(Record::DeadLetter {
            reason,
            payload: String::from_utf8_lossy(payload).into_owned(),
        }));
    }

    /// Transforms and ingests one source message.
    fn ingest(&mut self, topic: &str, payload: &[u8], now: Timestamp, out: &mut Vec<NodeOutput>) {
        let Some(src) = self.config.sources.iter().find(|s| match_topic(&s.topic, topic)) else {
            self.dead_letter(format!("{topic}: no source subscription"), payload, out);
            return;
        };
        let event = if src.transformer == EVENT_TRANSFORMER {
            decode_event(payload, self.engine.schemas()).map_err(|e| format!("{topic}: {e}"))
        } else {
            let t = self
                .config
                .transformers
                .iter()
                .find(|t| t.id == src.transformer)
                .expect("checked at construction");
            t.apply(payload, now, &self.config.id).map_err(|e| e.to_string())
        };
        let event = match event {
            Ok(e) => e,
            Err(reason) => return self.dead_letter(reason, payload, out),
        };
        let event = stamp(&self.engine, event, now, &mut self.stats);
        match self.engine.ingest(event) {
            Ok(em) => {
                self.stats.cep_ingested += 1;
                self.dispatch(em, now, out);
            }
            Err(e) => self.dead_letter(format!("{topic}: {e}"), payload, out),
        }
    }

    fn dispatch(&mut self, emissions: Vec<crate::cep::Emission>, now: Timestamp, out: &mut Vec<NodeOutput>) {
        for em in emissions {
            self.stats.cep_emitted += 1;
            let target = em.target.unwrap_or(NodeRole::Fog);
            let sink = self.sinks.get(&target).expect("every target has a sink").clone();
            match &sink.kind {
                SinkKind::Notification => {
                    out.push(NodeOutput::Record(Record::Emission {
                        pattern: em.produced_by,
                        topic: None,
                        event: em.event.clone(),
                    }));
                    out.push(NodeOutput::Record(Record::Notification {
                        sink: sink.id.clone(),
                        event: em.event,
                    }));
                }
                SinkKind::Topic { topic, via } => {
                    let payload = encode_event(&em.event, self.engine.schemas()).expect("emissions conform");
                    let links: Vec<LinkId> = self
                        .config
                        .fogs
                        .iter()
                        .enumerate()
                        .filter(|(_, f)| via.as_ref().is_none_or(|v| f.as_str() == v))
                        .map(|(i, _)| i as LinkId)
                        .collect();
                    for link in links {
                        let o = self.clients.get_mut(&link).expect("one client per fog").publish(
                            topic,
                            payload.clone(),
                            self.config.qos,
                            now,
                        );
                        self.client_output(link, o, now, out);
                    }
                    out.push(NodeOutput::Record(Record::Emission {
                        pattern: em.produced_by,
                        topic: Some(topic.clone()),
                        event: em.event,
                    }));
                }
            }
        }
    }

    fn client_output(&mut self, link: LinkId, o: ClientOutput, now: Timestamp, out: &mut Vec<NodeOutput>) {
        out.extend(o.send.into_iter().map(|p| NodeOutput::Mqtt(link, p)));
        for ev in o.events {
            match ev {
                ClientEvent::Message(p) => self.ingest(&p.topic, &p.payload, now, out),
                ClientEvent::GaveUp(p) => self.dead_letter(format!("{}: delivery gave up", p.topic), &p.payload, out),
                ClientEvent::ConnectFailed => out.push(NodeOutput::Record(Record::LinkFailed {
                    link,
                    reason: "fog broker refused the session".into(),
                })),
                ClientEvent::Connected | ClientEvent::Subscribed
                    if self.clients.get(&link).is_some_and(Client::is_ready) =>
                {
                    out.push(NodeOutput::Record(Record::Connected { link }));
                }
                _ => {}
            }
        }
    }
}

impl Node for CloudNode {
    fn id(&self) -> &NodeId {
        &self.config.id
    }

    fn role(&self) -> NodeRole {
        NodeRole::Cloud
    }

    fn dials(&self) -> Vec<Dial> {
        self.config
            .fogs
            .iter()
            .enumerate()
            .map(|(i, f)| Dial {
                link: i as LinkId,
                kind: LinkKind::Mqtt,
                to: f.clone(),
            })
            .collect()
    }

    fn handle(&mut self, now: Timestamp, input: NodeInput) -> Vec<NodeOutput> {
        let mut out = Vec::new();
        if self.engine.next_boundary().is_some_and(|b| b <= now) {
            let em = self.engine.advance_clock(now).expect("advancing never regresses");
            self.dispatch(em, now, &mut out);
        }
        match input {
            NodeInput::Up(link) => {
                if let Some(c) = self.clients.get_mut(&link) {
                    let o = c.start(now);
                    self.client_output(link, o, now, &mut out);
                }
            }
            NodeInput::Mqtt(link, pkt) => {
                if let Some(c) = self.clients.get_mut(&link) {
                    let o = c.handle(pkt, now);
                    self.client_output(link, o, now, &mut out);
                }
            }
            NodeInput::Tick => {
                let links: Vec<LinkId> = self.clients.keys().copied().collect();
                for link in links {
                    let o = self.clients.get_mut(&link).expect("listed").tick(now);
                    self.client_output(link, o, now, &mut out);
                }
            }
            NodeInput::Source { topic, payload } => self.ingest(&topic, &payload, now, &mut out),
            NodeInput::Down(link) => out.push(NodeOutput::Record(Record::LinkFailed {
                link,
                reason: "link closed".into(),
            })),
            _ => {}
        }
        out
    }

    fn next_deadline(&self) -> Option<Timestamp> {
        [
            self.engine.next_boundary(),
            self.clients.values().filter_map(Client::next_deadline).min(),
        ]
        .into_iter()
        .flatten()
        .min()
    }

    fn stats(&self) -> NodeStats {
        self.stats
    }

    fn in_flight(&self) -> usize {
        self.clients
            .values()
            .map(|c| c.inflight_count() + c.queued_count())
            .sum()
    }
}
