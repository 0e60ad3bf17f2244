use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::compile::{compile, holds, Compiled};
use super::{CepError, ClockMode, Emission, ValueKey};
use crate::event::{Event, EventSchema, NodeId, SchemaRegistry, StreamName, Timestamp};
use crate::pattern::PatternDef;

struct Group {
    count: i64,
    last: Event,
}

enum State {
    Filter,
    Batch {
        groups: Vec<Group>,
        index: BTreeMap<ValueKey, usize>,
        events: Vec<Event>,
    },
    Match {
        partials: Vec<Vec<Option<Event>>>,
        completed: BTreeSet<ValueKey>,
    },
}

struct Deployed {
    def: PatternDef,
    compiled: Compiled,
    state: State,
    next_boundary: Option<Timestamp>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EngineStats {
    pub ingested: u64,
    pub emitted: u64,
    pub boundaries: u64,
}

pub struct Engine {
    schemas: SchemaRegistry,
    mode: ClockMode,
    origin: Timestamp,
    clock: Timestamp,
    source: NodeId,
    patterns: Vec<Deployed>,
    topo: Vec<usize>,
    consumers: BTreeMap<StreamName, Vec<usize>>,
    stats: EngineStats,
}

impl Engine {
    /// `schemas` declares the raw input streams; batches tile time from `origin`.
    pub fn new(schemas: SchemaRegistry, mode: ClockMode, origin: Timestamp) -> Self {
        Engine {
            schemas,
            mode,
            origin,
            clock: origin,
            source: NodeId::new("cep"),
            patterns: Vec::new(),
            topo: Vec::new(),
            consumers: BTreeMap::new(),
            stats: EngineStats::default(),
        }
    }

    /// Node id written into the `source` of emitted events.
    pub fn with_source(mut self, source: NodeId) -> Self {
        self.source = source;
        self
    }

    pub fn schemas(&self) -> &SchemaRegistry {
        &self.schemas
    }

    pub fn mode(&self) -> ClockMode {
        self.mode
    }

    pub fn origin(&self) -> Timestamp {
        self.origin
    }

    pub fn clock(&self) -> Timestamp {
        self.clock
    }

    pub fn stats(&self) -> EngineStats {
        self.stats
    }

    /// Deployed patterns in deployment order.
    pub fn patterns(&self) -> impl Iterator<Item = &PatternDef> {
        self.patterns.iter().map(|d| &d.def)
    }

    /// Pattern names in processing order.
    pub fn topological_order(&self) -> Vec<&str> {
        self.topo.iter().map(|&i| self.patterns[i].def.name.as_str()).collect()
    }

    pub fn output_schema(&self, pattern: &str) -> Option<&EventSchema> {
        self.patterns
            .iter()
            .find(|d| d.def.name == pattern)
            .map(|d| &d.compiled.output)
    }

    /// Edges `input stream -> output stream`, one per deployed binding stream.
    pub fn stream_graph(&self) -> Vec<(StreamName, StreamName)> {
        let mut edges = Vec::new();
        for d in &self.patterns {
            for s in d.def.input_streams() {
                edges.push((s.clone(), d.def.insert_into.clone()));
            }
        }
        edges
    }

    /// Whether any deployed pattern reads `stream`.
    pub fn consumes(&self, stream: &StreamName) -> bool {
        self.consumers.contains_key(stream)
    }

    pub fn deploy(&mut self, def: PatternDef) -> Result<(), CepError> {
        def.validate()?;
        if self.patterns.iter().any(|d| d.def.name == def.name) {
            return Err(CepError::DuplicatePattern(def.name));
        }
        if def.bindings.iter().any(|b| b.stream == def.insert_into) {
            return Err(CepError::Cycle(def.name));
        }
        let compiled = compile(&def, &self.schemas)?;
        if let Some(existing) = self.schemas.get(&def.insert_into) {
            if existing.fields != compiled.output.fields {
                return Err(CepError::SchemaConflict {
                    pattern: def.name,
                    stream: def.insert_into.as_str().into(),
                });
            }
        }
        let state = if def.is_conjunction() {
            State::Match {
                partials: Vec::new(),
                completed: BTreeSet::new(),
            }
        } else if compiled.window.is_some() {
            State::Batch {
                groups: Vec::new(),
                index: BTreeMap::new(),
                events: Vec::new(),
            }
        } else {
            State::Filter
        };
        let next_boundary = compiled.window.map(|w| {
            let elapsed = self.clock - self.origin;
            self.origin + (elapsed / w + 1) * w
        });
        self.patterns.push(Deployed {
            def,
            compiled,
            state,
            next_boundary,
        });
        match topological(&self.patterns) {
            Some(order) => self.topo = order,
            None => {
                let d = self.patterns.pop().expect("just pushed");
                return Err(CepError::Cycle(d.def.name));
            }
        }
        let idx = self.patterns.len() - 1;
        let d = &self.patterns[idx];
        self.schemas.register(d.compiled.output.clone());
        for s in d.def.input_streams() {
            self.consumers.entry(s.clone()).or_default().push(idx);
        }
        Ok(())
    }

    /// Deploys a set whose members may read each other's outputs; each
    /// pattern is deployed once every stream it reads exists.
    pub fn deploy_all(&mut self, defs: impl IntoIterator<Item = PatternDef>) -> Result<(), CepError> {
        let mut pending: Vec<PatternDef> = defs.into_iter().collect();
        while !pending.is_empty() {
            let ready = pending
                .iter()
                .position(|d| d.bindings.iter().all(|b| self.schemas.contains(&b.stream)));
            match ready {
                Some(i) => {
                    let d = pending.remove(i);
                    self.deploy(d)?;
                }
                None => {
                    for d in &pending {
                        let unknown = d.bindings.iter().find(|b| {
                            !self.schemas.contains(&b.stream) && !pending.iter().any(|p| p.insert_into == b.stream)
                        });
                        if let Some(b) = unknown {
                            return Err(CepError::UnknownStream {
                                pattern: d.name.clone(),
                                stream: b.stream.as_str().into(),
                            });
                        }
                    }
                    return Err(CepError::Cycle(pending[0].name.clone()));
                }
            }
        }
        Ok(())
    }

    /// Fires boundaries up to the event's timestamp, then processes it.
    pub fn ingest(&mut self, event: Event) -> Result<Vec<Emission>, CepError> {
        let schema = self
            .schemas
            .get(&event.stream)
            .ok_or_else(|| CepError::UnknownInput(event.stream.as_str().into()))?;
        let fields = schema.conform(&event.fields)?;
        let mut ts = event.timestamp;
        if ts < self.clock {
            match self.mode {
                ClockMode::EventTime => {
                    return Err(CepError::TimeRegression {
                        clock: self.clock,
                        timestamp: ts,
                    })
                }
                ClockMode::ProcessingTime => ts = self.clock,
            }
        }
        let event = Event::new(event.stream, fields, ts, event.source);
        let mut out = Vec::new();
        self.fire_until(ts, &mut out);
        self.clock = ts;
        self.stats.ingested += 1;
        self.step(ts, Some(event), &mut out);
        Ok(out)
    }

    /// Fires every boundary at or before `to`.
    pub fn advance_clock(&mut self, to: Timestamp) -> Result<Vec<Emission>, CepError> {
        if to < self.clock {
            return match self.mode {
                ClockMode::EventTime => Err(CepError::TimeRegression {
                    clock: self.clock,
                    timestamp: to,
                }),
                ClockMode::ProcessingTime => Ok(Vec::new()),
            };
        }
        let mut out = Vec::new();
        self.fire_until(to, &mut out);
        self.clock = to;
        Ok(out)
    }

    pub fn next_boundary(&self) -> Option<Timestamp> {
        self.patterns.iter().filter_map(|d| d.next_boundary).min()
    }

    /// Ingests a whole log then advances to `horizon`, concatenating output.
    pub fn replay(&mut self, log: &[Event], horizon: Timestamp) -> Result<Vec<Emission>, CepError> {
        let mut out = Vec::new();
        for e in log {
            out.extend(self.ingest(e.clone())?);
        }
        out.extend(self.advance_clock(horizon.max(self.clock))?);
        Ok(out)
    }

    fn fire_until(&mut self, to: Timestamp, out: &mut Vec<Emission>) {
        while let Some(tau) = self.next_boundary().filter(|t| *t <= to) {
            self.clock = tau;
            self.stats.boundaries += 1;
            self.step(tau, None, out);
        }
    }

    fn step(&mut self, tau: Timestamp, raw: Option<Event>, out: &mut Vec<Emission>) {
        let mut inbox: Vec<Vec<Event>> = vec![Vec::new(); self.patterns.len()];
        let topo = self.topo.clone();
        match raw {
            Some(e) => self.deliver(e, &mut inbox),
            None => {
                for &p in &topo {
                    let d = &mut self.patterns[p];
                    if d.next_boundary != Some(tau) {
                        continue;
                    }
                    d.next_boundary = d.compiled.window.map(|w| tau + w);
                    let rows = close(d, tau);
                    self.emit(p, rows, tau, &mut inbox, out);
                }
            }
        }
        for &p in &topo {
            let items = core::mem::take(&mut inbox[p]);
            for e in items {
                let rows = process(&mut self.patterns[p], e, tau);
                self.emit(p, rows, tau, &mut inbox, out);
            }
        }
    }

    fn emit(
        &mut self,
        p: usize,
        rows: Vec<crate::event::Fields>,
        tau: Timestamp,
        inbox: &mut [Vec<Event>],
        out: &mut Vec<Emission>,
    ) {
        for fields in rows {
            let def = &self.patterns[p].def;
            let event = Event::new(def.insert_into.clone(), fields, tau, self.source.clone());
            let emission = Emission {
                event: event.clone(),
                produced_by: def.name.clone(),
                target: def.target(),
            };
            self.stats.emitted += 1;
            self.deliver(event, inbox);
            out.push(emission);
        }
    }

    fn deliver(&self, e: Event, inbox: &mut [Vec<Event>]) {
        if let Some(cs) = self.consumers.get(&e.stream) {
            for &c in cs {
                inbox[c].push(e.clone());
            }
        }
    }
}

/// Kahn's algorithm, always taking the ready pattern deployed earliest.
fn topological(patterns: &[Deployed]) -> Option<Vec<usize>> {
    let n = patterns.len();
    let mut indegree = vec![0usize; n];
    let mut edges: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (p, dp) in patterns.iter().enumerate() {
        for (q, dq) in patterns.iter().enumerate() {
            if dq.def.bindings.iter().any(|b| b.stream == dp.def.insert_into) {
                edges[p].push(q);
                indegree[q] += 1;
            }
        }
    }
    let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(p) = ready.pop_first() {
        order.push(p);
        for &q in &edges[p] {
            indegree[q] -= 1;
            if indegree[q] == 0 {
                ready.insert(q);
            }
        }
    }
    (order.len() == n).then_some(order)
}

fn close(d: &mut Deployed, tau: Timestamp) -> Vec<crate::event::Fields> {
    let c = &d.compiled;
    match &mut d.state {
        State::Filter => Vec::new(),
        State::Batch { groups, index, events } => {
            index.clear();
            let mut rows: Vec<_> = core::mem::take(groups)
                .into_iter()
                .map(|g| c.project(&[&g.last], tau, g.count))
                .collect();
            rows.extend(core::mem::take(events).iter().map(|e| c.project(&[e], tau, 0)));
            rows
        }
        State::Match { partials, completed } => {
            if c.window.is_some() {
                partials.clear();
                completed.clear();
            }
            Vec::new()
        }
    }
}

fn process(d: &mut Deployed, e: Event, tau: Timestamp) -> Vec<crate::event::Fields> {
    let c = &d.compiled;
    match &mut d.state {
        State::Filter => {
            if c.passes(0, &e) {
                vec![c.project(&[&e], tau, 0)]
            } else {
                Vec::new()
            }
        }
        State::Batch { groups, index, events } => {
            if !c.passes(0, &e) {
                return Vec::new();
            }
            if !c.aggregated() {
                events.push(e);
                return Vec::new();
            }
            let key = ValueKey(
                c.group_by
                    .iter()
                    .map(|f| e.field(f).cloned().unwrap_or(crate::event::FieldValue::Null))
                    .collect(),
            );
            let counted = c
                .count_field
                .as_ref()
                .is_some_and(|f| e.field(f).is_some_and(|v| !v.is_null()));
            let i = match index.get(&key) {
                Some(&i) => i,
                None => {
                    index.insert(key, groups.len());
                    groups.push(Group {
                        count: 0,
                        last: e.clone(),
                    });
                    groups.len() - 1
                }
            };
            let g = &mut groups[i];
            g.count += i64::from(counted);
            g.last = e;
            Vec::new()
        }
        State::Match { partials, completed } => match_event(c, partials, completed, e, tau),
    }
}

fn slot_value<'a>(
    slots: &'a [Option<Event>],
    candidate: (usize, &'a Event),
    slot: usize,
    field: &str,
) -> Option<Option<&'a crate::event::FieldValue>> {
    if slot == candidate.0 {
        return Some(candidate.1.field(field));
    }
    slots[slot].as_ref().map(|e| e.field(field))
}

fn compatible(c: &Compiled, slots: &[Option<Event>], slot: usize, e: &Event) -> bool {
    c.correlations.iter().all(|k| {
        match (
            slot_value(slots, (slot, e), k.lhs.0, &k.lhs.1),
            slot_value(slots, (slot, e), k.rhs.0, &k.rhs.1),
        ) {
            (Some(a), Some(b)) => holds(a, k.op, b),
            _ => true,
        }
    })
}

fn match_event(
    c: &Compiled,
    partials: &mut Vec<Vec<Option<Event>>>,
    completed: &mut BTreeSet<ValueKey>,
    e: Event,
    tau: Timestamp,
) -> Vec<crate::event::Fields> {
    let fits = |slot: usize| c.bindings[slot].stream == e.stream && c.passes(slot, &e);
    let n = c.bindings.len();
    for pi in 0..partials.len() {
        let found = (0..n).find(|&s| partials[pi][s].is_none() && fits(s) && compatible(c, &partials[pi], s, &e));
        let Some(s) = found else { continue };
        partials[pi][s] = Some(e);
        if partials[pi].iter().all(Option::is_some) {
            let slots: Vec<Event> = partials.remove(pi).into_iter().flatten().collect();
            return complete(c, completed, &slots, tau);
        }
        return Vec::new();
    }
    if let Some(s) = (0..n).find(|&s| fits(s)) {
        let mut slots = vec![None; n];
        slots[s] = Some(e);
        partials.push(slots);
    }
    Vec::new()
}

fn complete(
    c: &Compiled,
    completed: &mut BTreeSet<ValueKey>,
    slots: &[Event],
    tau: Timestamp,
) -> Vec<crate::event::Fields> {
    if c.window.is_some() {
        let key = ValueKey(
            c.correlations
                .iter()
                .flat_map(|k| [(k.lhs.0, &k.lhs.1), (k.rhs.0, &k.rhs.1)])
                .map(|(s, f)| slots[s].field(f).cloned().unwrap_or(crate::event::FieldValue::Null))
                .collect(),
        );
        if !completed.insert(key) {
            return Vec::new();
        }
    }
    let refs: Vec<&Event> = slots.iter().collect();
    vec![c.project(&refs, tau, 0)]
}

impl core::fmt::Debug for Engine {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let names: Vec<&String> = self.patterns.iter().map(|d| &d.def.name).collect();
        f.debug_struct("Engine")
            .field("mode", &self.mode)
            .field("clock", &self.clock)
            .field("patterns", &names)
            .finish()
    }
}
