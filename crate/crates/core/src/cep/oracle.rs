//! Brute-force reference for the engine. Each pattern's complete output is
//! computed from the complete, ordered list of its inputs: batches are
//! rebuilt by scanning every input once per boundary, and conjunctions are
//! replayed per batch. Every emission carries the key of the step that
//! produced it, and sorting by that key yields the engine's emission order.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::cmp::Ordering;

use super::{CepError, ClockMode, Emission, Engine};
use crate::event::{Event, FieldValue, Fields, NodeId, SchemaRegistry, StreamName, Timestamp};
use crate::pattern::{Binding, FieldPath, Operand, PatternDef, SelectItem};

/// Step and position of an event: instant, kind (0 boundary, 1 raw), raw
/// log index, phase (0 input or closing, 1 cascade), producer rank, sequence.
type Key = (Timestamp, u8, usize, u8, usize, u64);

struct Item {
    key: Key,
    event: Event,
}

/// Runs `log` through `patterns` from `origin` and fires every boundary up
/// to `horizon`.
pub fn oracle_replay(
    schemas: &SchemaRegistry,
    patterns: &[PatternDef],
    log: &[Event],
    origin: Timestamp,
    horizon: Timestamp,
    source: &NodeId,
) -> Result<Vec<Emission>, CepError> {
    // Deployment rules and output schemas are shared with the engine; the
    // semantics below are not.
    let mut deployer = Engine::new(schemas.clone(), ClockMode::EventTime, origin);
    deployer.deploy_all(patterns.iter().cloned())?;
    let schemas = deployer.schemas().clone();
    let deployed: Vec<PatternDef> = deployer.patterns().cloned().collect();

    let mut table: BTreeMap<StreamName, Vec<Item>> = BTreeMap::new();
    let mut last = origin;
    for (i, e) in log.iter().enumerate() {
        let schema = schemas
            .get(&e.stream)
            .ok_or_else(|| CepError::UnknownInput(e.stream.as_str().into()))?;
        let fields = schema.conform(&e.fields)?;
        if e.timestamp < last {
            return Err(CepError::TimeRegression {
                clock: last,
                timestamp: e.timestamp,
            });
        }
        last = e.timestamp;
        table.entry(e.stream.clone()).or_default().push(Item {
            key: (e.timestamp, 1, i, 0, 0, i as u64),
            event: Event::new(e.stream.clone(), fields, e.timestamp, e.source.clone()),
        });
    }
    let horizon = horizon.max(last);

    let mut out: Vec<(Key, Emission)> = Vec::new();
    for (rank, &p) in processing_order(&deployed).iter().enumerate() {
        let def = &deployed[p];
        let mut inputs: Vec<&Item> = Vec::new();
        for s in def.input_streams() {
            if let Some(items) = table.get(s) {
                inputs.extend(items.iter());
            }
        }
        inputs.sort_by_key(|a| a.key);
        let rows = if def.bindings.len() > 1 {
            conjunction(def, &schemas, &inputs, origin, rank)
        } else if let Some(w) = def.window_millis() {
            batches(def, &schemas, &inputs, origin, horizon, w, rank)
        } else {
            filter(def, &schemas, &inputs, rank)
        };
        for (key, fields) in rows {
            let event = Event::new(def.insert_into.clone(), fields, key.0, source.clone());
            out.push((
                key,
                Emission {
                    event: event.clone(),
                    produced_by: def.name.clone(),
                    target: def.target(),
                },
            ));
            table
                .entry(def.insert_into.clone())
                .or_default()
                .push(Item { key, event });
        }
    }
    out.sort_by_key(|a| a.0);
    Ok(out.into_iter().map(|(_, e)| e).collect())
}

/// Repeatedly picks the earliest-deployed pattern whose producers are all
/// placed.
fn processing_order(defs: &[PatternDef]) -> Vec<usize> {
    let mut placed: Vec<usize> = Vec::new();
    while placed.len() < defs.len() {
        let next = (0..defs.len()).find(|&q| {
            !placed.contains(&q)
                && (0..defs.len())
                    .all(|p| placed.contains(&p) || !defs[q].bindings.iter().any(|b| b.stream == defs[p].insert_into))
        });
        placed.push(next.expect("deployment rejects cycles"));
    }
    placed
}

fn value<'a>(e: &'a Event, field: &str) -> Option<&'a FieldValue> {
    e.fields.iter().find(|(n, _)| *n == field).map(|(_, v)| v)
}

fn test(a: Option<&FieldValue>, op: crate::pattern::CmpOp, b: Option<&FieldValue>) -> bool {
    let (Some(a), Some(b)) = (a, b) else { return false };
    match a.compare(b) {
        Ok(o) => op.holds(o),
        Err(_) => false,
    }
}

fn literal_filters_pass(b: &Binding, e: &Event) -> bool {
    e.stream == b.stream
        && b.predicates.iter().all(|p| match &p.rhs {
            Operand::Literal(v) => test(value(e, &p.lhs.field), p.op, Some(v)),
            Operand::Field(_) => true,
        })
}

/// Builds the output row; `slots` is indexed like `def.bindings`.
fn row(def: &PatternDef, schemas: &SchemaRegistry, slots: &[&Event], at: Timestamp, count: i64) -> Fields {
    let slot = |alias: &str| def.bindings.iter().position(|b| b.alias == alias).unwrap();
    let get = |path: &FieldPath| {
        value(slots[slot(&path.alias)], &path.field)
            .cloned()
            .unwrap_or(FieldValue::Null)
    };
    let mut pairs: Vec<(alloc::string::String, FieldValue)> = Vec::new();
    for item in &def.select {
        match item {
            SelectItem::FieldRef { path, name } => pairs.push((name.clone(), get(path))),
            SelectItem::CurrentTimestamp { name } => pairs.push((name.clone(), FieldValue::Integer(at as i64))),
            SelectItem::Count { name, .. } => pairs.push((name.clone(), FieldValue::Integer(count))),
            SelectItem::StarOf(alias) => {
                let e = slots[slot(alias)];
                let schema = schemas.get(&e.stream).expect("deployed");
                for (n, _) in &schema.fields {
                    pairs.push((n.clone(), value(e, n).cloned().unwrap_or(FieldValue::Null)));
                }
            }
        }
    }
    pairs.into_iter().collect()
}

fn filter(def: &PatternDef, schemas: &SchemaRegistry, inputs: &[&Item], rank: usize) -> Vec<(Key, Fields)> {
    let mut out = Vec::new();
    for it in inputs {
        if literal_filters_pass(&def.bindings[0], &it.event) {
            let (t, kind, raw, ..) = it.key;
            let key = (t, kind, raw, 1, rank, out.len() as u64);
            out.push((key, row(def, schemas, &[&it.event], t, 0)));
        }
    }
    out
}

fn batches(
    def: &PatternDef,
    schemas: &SchemaRegistry,
    inputs: &[&Item],
    origin: Timestamp,
    horizon: Timestamp,
    window: Timestamp,
    rank: usize,
) -> Vec<(Key, Fields)> {
    let b = &def.bindings[0];
    let count_field = def.select.iter().find_map(|s| match s {
        SelectItem::Count { path, .. } => Some(path.field.as_str()),
        _ => None,
    });
    let grouped = count_field.is_some() || !def.group_by.is_empty();
    let mut out = Vec::new();
    let mut end = origin + window;
    while end <= horizon {
        let start = end - window;
        let members: Vec<&Event> = inputs
            .iter()
            .filter(|it| it.key.0 >= start && it.key.0 < end)
            .map(|it| &it.event)
            .filter(|e| literal_filters_pass(b, e))
            .collect();
        let mut rows: Vec<Fields> = Vec::new();
        if grouped {
            // (key values, count, last member)
            let mut groups: Vec<(Vec<FieldValue>, i64, &Event)> = Vec::new();
            for e in &members {
                let k: Vec<FieldValue> = def
                    .group_by
                    .iter()
                    .map(|g| value(e, &g.field).cloned().unwrap_or(FieldValue::Null))
                    .collect();
                let counted = count_field
                    .and_then(|f| value(e, f))
                    .is_some_and(|v| *v != FieldValue::Null);
                let pos = groups.iter().position(|(gk, ..)| {
                    gk.len() == k.len() && gk.iter().zip(&k).all(|(a, b)| a.key_cmp(b) == Ordering::Equal)
                });
                match pos {
                    Some(i) => {
                        groups[i].1 += counted as i64;
                        groups[i].2 = e;
                    }
                    None => groups.push((k, counted as i64, e)),
                }
            }
            for (_, n, last) in groups {
                rows.push(row(def, schemas, &[last], end, n));
            }
        } else {
            for e in members {
                rows.push(row(def, schemas, &[e], end, 0));
            }
        }
        for r in rows {
            out.push(((end, 0, 0, 0, rank, out.len() as u64), r));
        }
        end += window;
    }
    out
}

fn conjunction(
    def: &PatternDef,
    schemas: &SchemaRegistry,
    inputs: &[&Item],
    origin: Timestamp,
    rank: usize,
) -> Vec<(Key, Fields)> {
    let window = def.window_millis();
    let n = def.bindings.len();
    let batch_of = |t: Timestamp| window.map_or(0, |w| (t - origin) / w);
    // Correlation predicates as (slot, field, op, slot, field).
    let mut corr = Vec::new();
    for (s, b) in def.bindings.iter().enumerate() {
        for p in &b.predicates {
            if let Operand::Field(r) = &p.rhs {
                let rs = def.bindings.iter().position(|x| x.alias == r.alias).unwrap();
                corr.push((s, p.lhs.field.as_str(), p.op, rs, r.field.as_str()));
            }
        }
    }
    let consistent = |slots: &[Option<&Event>]| {
        corr.iter().all(|&(a, fa, op, b, fb)| match (slots[a], slots[b]) {
            (Some(x), Some(y)) => test(value(x, fa), op, value(y, fb)),
            _ => true,
        })
    };

    let mut out = Vec::new();
    let mut partials: Vec<Vec<Option<&Event>>> = Vec::new();
    let mut seen: Vec<Vec<FieldValue>> = Vec::new();
    let mut current = None;
    for it in inputs {
        let (t, kind, raw, ..) = it.key;
        if current != Some(batch_of(t)) {
            current = Some(batch_of(t));
            if window.is_some() {
                partials.clear();
                seen.clear();
            }
        }
        let e = &it.event;
        let mut placed = false;
        'search: for pi in 0..partials.len() {
            for s in 0..n {
                if partials[pi][s].is_some() || !literal_filters_pass(&def.bindings[s], e) {
                    continue;
                }
                let mut trial = partials[pi].clone();
                trial[s] = Some(e);
                if !consistent(&trial) {
                    continue;
                }
                placed = true;
                if trial.iter().all(Option::is_some) {
                    partials.remove(pi);
                    let slots: Vec<&Event> = trial.into_iter().flatten().collect();
                    let dedupe: Vec<FieldValue> = corr
                        .iter()
                        .flat_map(|&(a, fa, _, b, fb)| [(a, fa), (b, fb)])
                        .map(|(s, f)| value(slots[s], f).cloned().unwrap_or(FieldValue::Null))
                        .collect();
                    let duplicate = window.is_some()
                        && seen
                            .iter()
                            .any(|k| k.iter().zip(&dedupe).all(|(a, b)| a.key_cmp(b) == Ordering::Equal));
                    if !duplicate {
                        if window.is_some() {
                            seen.push(dedupe);
                        }
                        let key = (t, kind, raw, 1, rank, out.len() as u64);
                        out.push((key, row(def, schemas, &slots, t, 0)));
                    }
                } else {
                    partials[pi] = trial;
                }
                break 'search;
            }
        }
        if !placed {
            if let Some(s) = (0..n).find(|&s| literal_filters_pass(&def.bindings[s], e)) {
                let mut fresh = alloc::vec![None; n];
                fresh[s] = Some(e);
                partials.push(fresh);
            }
        }
    }
    out
}
