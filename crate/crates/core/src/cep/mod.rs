//! Complex event processing over deployed patterns with deterministic
//! event-time semantics.
//!
//! Time advances in steps. A boundary step at instant `t` first closes every
//! batch ending at `t`, in topological order, and then lets downstream
//! patterns consume what was emitted. A raw step delivers one ingested event
//! and then its cascade. Boundary steps at `t` precede the raw step of an
//! event stamped `t`, so such an event belongs to the new batch.
//!
//! Inside a step each pattern, in topological order, consumes its inputs
//! ordered by (phase, producer rank, emission sequence), where the raw event
//! and batch closings form phase 0 and cascaded emissions phase 1. Emissions
//! are returned in exactly that processing order.

mod compile;
mod engine;
pub mod oracle;

use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{Event, EventError, FieldValue, NodeRole, Timestamp};
use crate::pattern::PatternError;

pub use engine::{Engine, EngineStats};
pub use oracle::oracle_replay;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    /// The clock follows event timestamps; regressions are errors.
    #[default]
    EventTime,
    /// The caller drives the clock from a wall clock; late events are
    /// stamped with the current clock.
    ProcessingTime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Emission {
    pub event: Event,
    pub produced_by: String,
    pub target: Option<NodeRole>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CepError {
    #[error(transparent)]
    Pattern(#[from] PatternError),
    #[error(transparent)]
    Event(#[from] EventError),
    #[error("a pattern named {0:?} is already deployed")]
    DuplicatePattern(String),
    #[error("pattern {pattern:?} reads unknown stream {stream:?}")]
    UnknownStream { pattern: String, stream: String },
    #[error("unknown stream {0:?}")]
    UnknownInput(String),
    #[error("deploying {0:?} would create a cycle in the stream graph")]
    Cycle(String),
    #[error("pattern {pattern:?}: stream {stream:?} has no field {field:?}")]
    UnknownField {
        pattern: String,
        stream: String,
        field: String,
    },
    #[error("pattern {pattern:?}: cannot compare {left} with {right} in {predicate}")]
    TypeMismatch {
        pattern: String,
        predicate: String,
        left: &'static str,
        right: &'static str,
    },
    #[error("pattern {pattern:?}: duplicate output field {field:?}")]
    DuplicateOutput { pattern: String, field: String },
    #[error("pattern {pattern:?}: output does not match the existing schema of {stream:?}")]
    SchemaConflict { pattern: String, stream: String },
    #[error("event at {timestamp} is older than the engine clock {clock}")]
    TimeRegression { clock: Timestamp, timestamp: Timestamp },
}

/// Tuple of values ordered with [`FieldValue::key_cmp`], used for group and
/// correlation keys.
#[derive(Debug, Clone)]
pub(crate) struct ValueKey(pub Vec<FieldValue>);

impl PartialEq for ValueKey {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for ValueKey {}

impl PartialOrd for ValueKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ValueKey {
    fn cmp(&self, other: &Self) -> Ordering {
        for (a, b) in self.0.iter().zip(&other.0) {
            match a.key_cmp(b) {
                Ordering::Equal => {}
                o => return o,
            }
        }
        self.0.len().cmp(&other.0.len())
    }
}
