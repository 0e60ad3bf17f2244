//! Runs the agents of one edge node under a fixed interleaving: agents take
//! turns in id order, one stimulus per turn, until every inbox is empty.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use super::{AclMessage, Agent, AgentError, AgentSpec, Effect, Stimulus, Trigger};
use crate::event::{FieldValue, NodeId, Timestamp};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HostError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("agent {0:?} already exists")]
    Duplicate(String),
    #[error("no agent {0:?} on this node")]
    UnknownAgent(String),
    #[error("agent {agent:?} has no sensor {sensor:?}")]
    UnknownSensor { agent: String, sensor: String },
}

#[derive(Debug, Clone)]
pub struct AgentHost {
    node: NodeId,
    agents: BTreeMap<String, Agent>,
    inbox: BTreeMap<String, VecDeque<Stimulus>>,
    /// (due, agent, rule)
    timers: BTreeSet<(Timestamp, String, String)>,
}

impl AgentHost {
    pub fn new(node: NodeId) -> Self {
        AgentHost {
            node,
            agents: BTreeMap::new(),
            inbox: BTreeMap::new(),
            timers: BTreeSet::new(),
        }
    }

    pub fn node(&self) -> &NodeId {
        &self.node
    }

    /// Adds an agent; its timer rules first fire one period after `now`.
    pub fn add(&mut self, spec: AgentSpec, now: Timestamp) -> Result<(), HostError> {
        if self.agents.contains_key(&spec.id) {
            return Err(HostError::Duplicate(spec.id));
        }
        let agent = Agent::new(spec, self.node.clone())?;
        for r in agent.rules() {
            if let Trigger::Timer(p) = r.trigger {
                self.timers.insert((now + p, agent.id().into(), r.id.clone()));
            }
        }
        self.inbox.insert(agent.id().into(), VecDeque::new());
        self.agents.insert(agent.id().into(), agent);
        Ok(())
    }

    pub fn agent(&self, id: &str) -> Option<&Agent> {
        self.agents.get(id)
    }

    pub fn agents(&self) -> impl Iterator<Item = &Agent> {
        self.agents.values()
    }

    /// Queues a message for `agent`.
    pub fn deliver(&mut self, agent: &str, m: AclMessage) -> Result<(), HostError> {
        self.push(agent, Stimulus::Message(m))
    }

    /// Queues a sensor sample for `agent`.
    pub fn sample(&mut self, agent: &str, sensor: &str, value: FieldValue) -> Result<(), HostError> {
        let a = self
            .agents
            .get(agent)
            .ok_or_else(|| HostError::UnknownAgent(agent.into()))?;
        if !a.spec().sensors.iter().any(|s| s == sensor) {
            return Err(HostError::UnknownSensor {
                agent: agent.into(),
                sensor: sensor.into(),
            });
        }
        self.push(
            agent,
            Stimulus::Sensor {
                name: sensor.into(),
                value,
            },
        )
    }

    fn push(&mut self, agent: &str, s: Stimulus) -> Result<(), HostError> {
        self.inbox
            .get_mut(agent)
            .ok_or_else(|| HostError::UnknownAgent(agent.into()))?
            .push_back(s);
        Ok(())
    }

    pub fn next_timer(&self) -> Option<Timestamp> {
        self.timers.first().map(|t| t.0)
    }

    /// Queues every timer due at or before `now`, including missed periods.
    pub fn fire_timers(&mut self, now: Timestamp) {
        while let Some((due, agent, rule)) = self.timers.first().cloned() {
            if due > now {
                break;
            }
            self.timers.pop_first();
            let period = self.agents[&agent].rules().find_map(|r| match r.trigger {
                Trigger::Timer(p) if r.id == rule => Some(p),
                _ => None,
            });
            // A rule update may have removed or changed the timer.
            if let Some(p) = period {
                self.timers.insert((due + p, agent.clone(), rule.clone()));
                self.inbox
                    .get_mut(&agent)
                    .expect("agent exists")
                    .push_back(Stimulus::Timer { rule });
            }
        }
    }

    pub fn pending(&self) -> usize {
        self.inbox.values().map(VecDeque::len).sum()
    }

    /// Processes every queued stimulus and returns the effects tagged with
    /// the agent that produced them. Actuations and state changes are
    /// already applied to the agents; sends and fog publishes are left to
    /// the caller.
    pub fn run(&mut self, now: Timestamp) -> Vec<(String, Effect)> {
        let mut out = Vec::new();
        while self.pending() > 0 {
            for (id, queue) in &mut self.inbox {
                let Some(s) = queue.pop_front() else { continue };
                let agent = self.agents.get_mut(id).expect("every inbox has an agent");
                let had_timers = timer_rules(agent);
                let effects = agent.step(&s, now);
                if effects.iter().any(|e| matches!(e, Effect::RuleReplaced { .. })) {
                    let timers = timer_rules(agent);
                    for (rule, p) in timers.iter().filter(|t| !had_timers.contains(t)) {
                        self.timers.retain(|(_, a, r)| !(a == id && r == rule));
                        self.timers.insert((now + p, id.clone(), rule.clone()));
                    }
                }
                out.extend(effects.into_iter().map(|e| (id.clone(), e)));
            }
        }
        out
    }
}

fn timer_rules(a: &Agent) -> Vec<(String, Timestamp)> {
    a.rules()
        .filter_map(|r| match r.trigger {
            Trigger::Timer(p) => Some((r.id.clone(), p)),
            _ => None,
        })
        .collect()
}
