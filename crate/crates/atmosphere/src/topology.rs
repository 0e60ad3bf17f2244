//! Node construction from a scenario and its run settings.

use std::fmt;

use atmosphere_core::event::{NodeId, StreamName};
use atmosphere_core::mqtt::{BrokerConfig, QoS};
use atmosphere_core::node::{
    CloudConfig, CloudNode, EdgeConfig, EdgeNode, FogConfig, FogNode, Heartbeat, Node, ProbeConfig, ProbeVia,
    UserConfig, UserNode,
};

use crate::config::{Mode, Scenario};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuildError {
    pointer: String,
    message: String,
}

impl BuildError {
    pub fn pointer(&self) -> &str {
        &self.pointer
    }
}

impl fmt::Display for BuildError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for BuildError {}

fn err(pointer: String, e: impl fmt::Display) -> BuildError {
    BuildError {
        pointer,
        message: e.to_string(),
    }
}

/// One node per topology entry, in startup order. The run mode decides
/// which paths exist: cep-only drops the agent gateway, agents-only drops
/// the engines and the edge broker sessions.
pub fn build_nodes(s: &Scenario) -> Result<Vec<Box<dyn Node>>, BuildError> {
    let run = &s.run;
    let qos = QoS::from_u8(run.qos).ok_or_else(|| err("/run/qos".into(), "qos must be 0 or 1"))?;
    let broker = BrokerConfig {
        retry_timeout_ms: run.retry_timeout_ms,
        max_retries: run.max_retries,
    };
    let mut nodes: Vec<Box<dyn Node>> = Vec::new();

    for (i, f) in s.fogs.iter().enumerate() {
        let mut c = FogConfig::new(&f.id, s.schemas.clone(), f.patterns.clone());
        c.ingest = f.ingest.clone();
        c.peers = f.peers.iter().map(NodeId::new).collect();
        c.clock = run.clock;
        c.qos = qos;
        c.cep = run.mode != Mode::AgentsOnly;
        c.gateway = run.mode != Mode::CepOnly;
        c.broker = broker;
        let node = FogNode::new(c).map_err(|e| err(format!("/topology/fogs/{i}/patterns"), e))?;
        nodes.push(Box::new(node));
    }

    for (i, c) in s.clouds.iter().enumerate() {
        let config = CloudConfig {
            id: NodeId::new(&c.id),
            fogs: c.fogs.iter().map(NodeId::new).collect(),
            sources: c.sources.clone(),
            transformers: c.transformers.clone(),
            patterns: c.patterns.clone(),
            sinks: c.sinks.clone(),
            schemas: s.schemas.clone(),
            clock: run.clock,
            qos,
            retry_timeout_ms: run.retry_timeout_ms,
            max_retries: run.max_retries,
        };
        let node = CloudNode::new(config).map_err(|e| err(format!("/topology/clouds/{i}"), e))?;
        nodes.push(Box::new(node));
    }

    for (i, e) in s.edges.iter().enumerate() {
        let mut c = EdgeConfig::new(&e.id, &e.fog);
        c.qos = qos;
        c.agents = e.agents.clone();
        c.mqtt = run.mode != Mode::AgentsOnly;
        c.gateway = run.mode != Mode::CepOnly;
        c.retry_timeout_ms = run.retry_timeout_ms;
        c.max_retries = run.max_retries;
        if let Some(p) = &e.probe {
            c.probe = Some(ProbeConfig {
                reply_stream: StreamName::new(p.reply_stream.as_str())
                    .map_err(|x| err(format!("/topology/edges/{i}/probe/reply_stream"), x))?,
                via: if run.mode == Mode::AgentsOnly {
                    ProbeVia::Acl
                } else {
                    ProbeVia::Mqtt
                },
            });
        }
        if let (Some(h), Mode::Full) = (&e.heartbeat, run.mode) {
            c.heartbeat = Some(Heartbeat {
                period_ms: h.period_ms,
                stream: StreamName::new(h.stream.as_str())
                    .map_err(|x| err(format!("/topology/edges/{i}/heartbeat/stream"), x))?,
            });
        }
        let node = EdgeNode::new(c).map_err(|x| err(format!("/topology/edges/{i}"), x))?;
        nodes.push(Box::new(node));
    }

    for u in &s.users {
        nodes.push(Box::new(UserNode::new(UserConfig {
            id: NodeId::new(&u.id),
            fog: NodeId::new(&u.fog),
            subscriptions: u.subscriptions.clone(),
            qos,
        })));
    }
    Ok(nodes)
}
