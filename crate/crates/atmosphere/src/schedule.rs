//! Turns simulators and the scripted timeline into a time-ordered list of
//! node inputs.

use atmosphere_core::event::{Event, FieldValue, Fields, NodeId, StreamName};
use atmosphere_core::node::NodeInput;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use crate::config::{agent_id, Generator, Scenario, SimOutput, SimulatorSpec, TimelineAction};

#[derive(Debug, Clone, PartialEq)]
pub struct Stimulus {
    /// Offset from the start of the run.
    pub at_us: u64,
    pub node: String,
    pub input: NodeInput,
}

impl Stimulus {
    pub fn probe_id(&self) -> Option<u64> {
        match &self.input {
            NodeInput::Probe { id, .. } => Some(*id),
            _ => None,
        }
    }
}

fn draw(g: &Generator, rng: &mut ChaCha8Rng) -> FieldValue {
    let scalar = |v: &Value| FieldValue::from_json(v).unwrap_or(FieldValue::Null);
    match g {
        Generator::Constant(v) => scalar(v),
        Generator::Uniform([lo, hi]) => FieldValue::Integer(rng.gen_range(*lo..=*hi)),
        Generator::Choice(vs) => scalar(&vs[rng.gen_range(0..vs.len())]),
        Generator::Bernoulli(p) => FieldValue::Boolean(rng.gen_bool(*p)),
    }
}

fn simulator_seed(run_seed: u64, index: usize) -> u64 {
    run_seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn event_times(sim: &SimulatorSpec, rate: f64, duration_us: u64) -> impl Iterator<Item = u64> + '_ {
    let start = sim.start_ms * 1000;
    let limit = sim.count.unwrap_or(u64::MAX);
    (0..limit)
        .map(move |k| start + (k as f64 * 1e6 / rate) as u64)
        .take_while(move |t| *t < duration_us)
}

/// Every input of the run, ordered by time. Probe ids count up from 0 in
/// send order.
pub fn build_schedule(s: &Scenario) -> Vec<Stimulus> {
    let duration_us = (s.run.duration_s * 1e6) as u64;
    // (time, source index, sequence) orders ties deterministically.
    let mut items: Vec<(u64, usize, u64, Stimulus)> = Vec::new();

    for (i, entry) in s.timeline.iter().enumerate() {
        for j in 0..entry.count {
            let at_ms = entry.at_ms + j * entry.every_ms;
            let at_us = at_ms * 1000;
            if at_us >= duration_us {
                break;
            }
            let input = match &entry.action {
                TimelineAction::Sample { agent, sensor, value } => NodeInput::Sample {
                    agent: agent_id(&entry.node, agent),
                    sensor: sensor.clone(),
                    value: FieldValue::from_json(value).unwrap_or(FieldValue::Null),
                },
                TimelineAction::Publish { topic, stream, fields } => NodeInput::Publish {
                    topic: topic.clone(),
                    event: Event::new(
                        StreamName::new(stream.as_str()).expect("validated stream name"),
                        fields
                            .iter()
                            .map(|(k, v)| (k.clone(), FieldValue::from_json(v).unwrap_or(FieldValue::Null)))
                            .collect(),
                        at_ms,
                        NodeId::new(&entry.node),
                    ),
                },
                TimelineAction::Source { topic, payload } => NodeInput::Source {
                    topic: topic.clone(),
                    payload: serde_json::to_vec(payload).expect("JSON values serialize"),
                },
            };
            items.push((
                at_us,
                i,
                j,
                Stimulus {
                    at_us,
                    node: entry.node.clone(),
                    input,
                },
            ));
        }
    }

    let base = s.timeline.len();
    for (i, sim) in s.simulators.iter().enumerate() {
        let rate = s.run.rate.unwrap_or(sim.rate);
        let schema = s.schemas.get_str(&sim.stream).expect("validated stream");
        let mut rng = ChaCha8Rng::seed_from_u64(sim.seed.unwrap_or_else(|| simulator_seed(s.run.seed, i)));
        for (k, at_us) in event_times(sim, rate, duration_us).enumerate() {
            let mut fields = Fields::new();
            for (name, _) in &schema.fields {
                let v = match sim.fields.get(name) {
                    Some(g) => draw(g, &mut rng),
                    // The probe id is filled in below.
                    None => FieldValue::Integer(0),
                };
                fields.set(name.clone(), v);
            }
            let event = Event::new(schema.stream.clone(), fields, at_us / 1000, NodeId::new(&sim.edge));
            let input = match &sim.output {
                SimOutput::Probe => NodeInput::Probe { id: 0, event },
                SimOutput::Publish { topic } => NodeInput::Publish {
                    topic: topic.clone(),
                    event,
                },
                SimOutput::Sample { agent, sensor, field } => NodeInput::Sample {
                    agent: agent_id(&sim.edge, agent),
                    sensor: sensor.clone(),
                    value: event.field(field).cloned().unwrap_or(FieldValue::Null),
                },
            };
            items.push((
                at_us,
                base + i,
                k as u64,
                Stimulus {
                    at_us,
                    node: sim.edge.clone(),
                    input,
                },
            ));
        }
    }

    items.sort_by_key(|(t, src, seq, _)| (*t, *src, *seq));
    let mut next_probe = 0u64;
    items
        .into_iter()
        .map(|(_, _, _, mut st)| {
            if let NodeInput::Probe { id, event } = &mut st.input {
                *id = next_probe;
                event.fields.set("rt", FieldValue::Integer(next_probe as i64));
                next_probe += 1;
            }
            st
        })
        .collect()
}
