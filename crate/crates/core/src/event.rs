//! Canonical event representation, stream schemas and the JSON payload codec.
//!
//! Every tier exchanges [`Event`]s encoded as flat JSON objects. Three reserved
//! keys carry the envelope (`_stream`, `_ts`, `_src`); every other key is a
//! domain field. Encoding is byte-deterministic: reserved keys first, then the
//! fields in schema declaration order.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Milliseconds since the Unix epoch (or since run start for virtual clocks).
pub type Timestamp = u64;

/// Largest integer magnitude that survives a trip through a JSON double.
pub const MAX_SAFE_INTEGER: i64 = 1 << 53;

pub const KEY_STREAM: &str = "_stream";
pub const KEY_TS: &str = "_ts";
pub const KEY_SRC: &str = "_src";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EventError {
    #[error("invalid stream name {0:?}")]
    InvalidStream(String),
    #[error("invalid field name {0:?}")]
    InvalidFieldName(String),
    #[error("unknown stream {0:?}")]
    UnknownStream(String),
    #[error("field {field:?}: expected {expected}, found {found}")]
    FieldType {
        field: String,
        expected: &'static str,
        found: &'static str,
    },
    #[error("missing field {0:?}")]
    MissingField(String),
    #[error("undeclared field {0:?}")]
    UndeclaredField(String),
    #[error("duplicate field {0:?}")]
    DuplicateField(String),
    #[error("field {0:?}: integer outside the exactly representable range")]
    IntegerRange(String),
    #[error("field {0:?}: number is not finite")]
    NonFinite(String),
    #[error("malformed payload: {0}")]
    Malformed(String),
}

/// A typed scalar carried in an event field.
#[derive(Debug, Clone, PartialEq)]
pub enum FieldValue {
    Number(f64),
    Integer(i64),
    String(String),
    Boolean(bool),
    Null,
}

/// Returned when two values of incompatible types are compared.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot compare {left} with {right}")]
pub struct TypeMismatch {
    pub left: &'static str,
    pub right: &'static str,
}

impl FieldValue {
    pub fn type_name(&self) -> &'static str {
        match self {
            FieldValue::Number(_) => "number",
            FieldValue::Integer(_) => "integer",
            FieldValue::String(_) => "string",
            FieldValue::Boolean(_) => "boolean",
            FieldValue::Null => "null",
        }
    }

    pub fn is_null(&self) -> bool {
        matches!(self, FieldValue::Null)
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            FieldValue::Number(n) => Some(*n),
            FieldValue::Integer(i) => Some(*i as f64),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            FieldValue::String(s) => Some(s),
            _ => None,
        }
    }

    /// Orders two values of compatible type. Integers are coerced to numbers
    /// when compared with numbers; every other cross-type pair is an error.
    /// `Null` is only comparable with `Null`.
    pub fn compare(&self, other: &FieldValue) -> Result<Ordering, TypeMismatch> {
        use FieldValue::*;
        let ord = match (self, other) {
            (Integer(a), Integer(b)) => a.cmp(b),
            (Number(a), Number(b)) => a.total_cmp(b),
            (Integer(a), Number(b)) => (*a as f64).total_cmp(b),
            (Number(a), Integer(b)) => a.total_cmp(&(*b as f64)),
            (String(a), String(b)) => a.cmp(b),
            (Boolean(a), Boolean(b)) => a.cmp(b),
            (Null, Null) => Ordering::Equal,
            _ => {
                return Err(TypeMismatch {
                    left: self.type_name(),
                    right: other.type_name(),
                })
            }
        };
        Ok(ord)
    }

    /// Total order used for grouping keys; never fails. Values of different
    /// types order by type rank.
    pub fn key_cmp(&self, other: &FieldValue) -> Ordering {
        fn rank(v: &FieldValue) -> u8 {
            match v {
                FieldValue::Null => 0,
                FieldValue::Boolean(_) => 1,
                FieldValue::Integer(_) | FieldValue::Number(_) => 2,
                FieldValue::String(_) => 3,
            }
        }
        match rank(self).cmp(&rank(other)) {
            Ordering::Equal => self.compare(other).unwrap_or(Ordering::Equal),
            o => o,
        }
    }

    /// JSON form of the value; non-finite numbers become null.
    pub fn to_json(&self) -> Value {
        match self {
            FieldValue::Number(n) => serde_json::Number::from_f64(*n)
                .map(Value::Number)
                .unwrap_or(Value::Null),
            FieldValue::Integer(i) => Value::from(*i),
            FieldValue::String(s) => Value::String(s.clone()),
            FieldValue::Boolean(b) => Value::Bool(*b),
            FieldValue::Null => Value::Null,
        }
    }

    /// Untyped conversion from JSON: integral JSON numbers become `Integer`.
    pub fn from_json(v: &Value) -> Option<FieldValue> {
        match v {
            Value::Null => Some(FieldValue::Null),
            Value::Bool(b) => Some(FieldValue::Boolean(*b)),
            Value::String(s) => Some(FieldValue::String(s.clone())),
            Value::Number(n) => {
                if let Some(i) = n.as_i64() {
                    Some(FieldValue::Integer(i))
                } else {
                    n.as_f64().map(FieldValue::Number)
                }
            }
            _ => None,
        }
    }
}

impl fmt::Display for FieldValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldValue::Number(n) => write!(f, "{n}"),
            FieldValue::Integer(i) => write!(f, "{i}"),
            FieldValue::String(s) => f.write_str(s),
            FieldValue::Boolean(b) => write!(f, "{b}"),
            FieldValue::Null => f.write_str("null"),
        }
    }
}

impl From<f64> for FieldValue {
    fn from(v: f64) -> Self {
        FieldValue::Number(v)
    }
}
impl From<i64> for FieldValue {
    fn from(v: i64) -> Self {
        FieldValue::Integer(v)
    }
}
impl From<bool> for FieldValue {
    fn from(v: bool) -> Self {
        FieldValue::Boolean(v)
    }
}
impl From<&str> for FieldValue {
    fn from(v: &str) -> Self {
        FieldValue::String(v.into())
    }
}
impl From<String> for FieldValue {
    fn from(v: String) -> Self {
        FieldValue::String(v)
    }
}

impl Serialize for FieldValue {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

impl<'de> Deserialize<'de> for FieldValue {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(d)?;
        FieldValue::from_json(&v).ok_or_else(|| serde::de::Error::custom("expected a scalar"))
    }
}

pub(crate) fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Name of an event stream: `[A-Za-z_][A-Za-z0-9_]*`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct StreamName(String);

impl StreamName {
    pub fn new(name: impl Into<String>) -> Result<Self, EventError> {
        let name = name.into();
        if is_identifier(&name) {
            Ok(StreamName(name))
        } else {
            Err(EventError::InvalidStream(name))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for StreamName {
    type Error = EventError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        StreamName::new(s)
    }
}

impl From<StreamName> for String {
    fn from(s: StreamName) -> String {
        s.0
    }
}

impl fmt::Display for StreamName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl PartialEq<str> for StreamName {
    fn eq(&self, other: &str) -> bool {
        self.0 == other
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        NodeId(id.into())
    }
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeRole {
    Edge,
    Fog,
    Cloud,
    User,
}

/// Ordered field map with unique names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Fields(Vec<(String, FieldValue)>);

impl Fields {
    pub fn new() -> Self {
        Fields(Vec::new())
    }

    /// Builds a field map, rejecting duplicate names.
    pub fn from_pairs<I, K>(pairs: I) -> Result<Self, EventError>
    where
        I: IntoIterator<Item = (K, FieldValue)>,
        K: Into<String>,
    {
        let mut out = Fields::new();
        for (k, v) in pairs {
            let k = k.into();
            if out.get(&k).is_some() {
                return Err(EventError::DuplicateField(k));
            }
            out.0.push((k, v));
        }
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&FieldValue> {
        self.0.iter().find(|(k, _)| k == name).map(|(_, v)| v)
    }

    /// Inserts or replaces, keeping the original position on replace.
    pub fn set(&mut self, name: impl Into<String>, value: FieldValue) {
        let name = name.into();
        match self.0.iter_mut().find(|(k, _)| *k == name) {
            Some(slot) => slot.1 = value,
            None => self.0.push((name, value)),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &FieldValue)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<K: Into<String>> FromIterator<(K, FieldValue)> for Fields {
    /// Later duplicates overwrite earlier ones.
    fn from_iter<T: IntoIterator<Item = (K, FieldValue)>>(iter: T) -> Self {
        let mut out = Fields::new();
        for (k, v) in iter {
            out.set(k, v);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub stream: StreamName,
    pub fields: Fields,
    pub timestamp: Timestamp,
    pub source: NodeId,
}

impl Event {
    pub fn new(stream: StreamName, fields: Fields, timestamp: Timestamp, source: NodeId) -> Self {
        Event {
            stream,
            fields,
            timestamp,
            source,
        }
    }

    pub fn field(&self, name: &str) -> Option<&FieldValue> {
        self.fields.get(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldType {
    Number,
    Integer,
    String,
    Boolean,
}

impl FieldType {
    pub fn name(self) -> &'static str {
        match self {
            FieldType::Number => "number",
            FieldType::Integer => "integer",
            FieldType::String => "string",
            FieldType::Boolean => "boolean",
        }
    }

    /// Whether `v` may be stored in a field of this type. Nulls are accepted
    /// for every declared type.
    pub fn admits(self, v: &FieldValue) -> bool {
        matches!(
            (self, v),
            (_, FieldValue::Null)
                | (FieldType::Number, FieldValue::Number(_))
                | (FieldType::Number, FieldValue::Integer(_))
                | (FieldType::Integer, FieldValue::Integer(_))
                | (FieldType::String, FieldValue::String(_))
                | (FieldType::Boolean, FieldValue::Boolean(_))
        )
    }
}

/// Declared shape of one stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSchema {
    pub stream: StreamName,
    pub fields: Vec<(String, FieldType)>,
}

impl EventSchema {
    pub fn new(stream: StreamName, fields: Vec<(String, FieldType)>) -> Result<Self, EventError> {
        let mut seen: Vec<&str> = Vec::new();
        for (name, _) in &fields {
            if !is_identifier(name) || name.starts_with('_') {
                return Err(EventError::InvalidFieldName(name.clone()));
            }
            if seen.contains(&name.as_str()) {
                return Err(EventError::DuplicateField(name.clone()));
            }
            seen.push(name);
        }
        Ok(EventSchema { stream, fields })
    }

    pub fn field_type(&self, name: &str) -> Option<FieldType> {
        self.fields.iter().find(|(n, _)| n == name).map(|(_, t)| *t)
    }

    /// Checks `fields` against this schema without modifying them.
    pub fn validate(&self, fields: &Fields) -> Result<(), EventError> {
        for (name, value) in fields.iter() {
            let ty = self
                .field_type(name)
                .ok_or_else(|| EventError::UndeclaredField(name.into()))?;
            check_value(name, ty, value)?;
        }
        for (name, _) in &self.fields {
            if fields.get(name).is_none() {
                return Err(EventError::MissingField(name.clone()));
            }
        }
        Ok(())
    }

    /// Validates and returns the fields in declaration order with integers
    /// widened where a number is declared.
    pub fn conform(&self, fields: &Fields) -> Result<Fields, EventError> {
        self.validate(fields)?;
        let mut out = Fields::new();
        for (name, ty) in &self.fields {
            let v = fields.get(name).cloned().unwrap_or(FieldValue::Null);
            let v = match (ty, v) {
                (FieldType::Number, FieldValue::Integer(i)) => FieldValue::Number(i as f64),
                (_, v) => v,
            };
            out.0.push((name.clone(), v));
        }
        Ok(out)
    }
}

fn check_value(name: &str, ty: FieldType, value: &FieldValue) -> Result<(), EventError> {
    if !ty.admits(value) {
        return Err(EventError::FieldType {
            field: name.into(),
            expected: ty.name(),
            found: value.type_name(),
        });
    }
    match value {
        FieldValue::Integer(i) if i.unsigned_abs() > MAX_SAFE_INTEGER as u64 => {
            Err(EventError::IntegerRange(name.into()))
        }
        FieldValue::Number(n) if !n.is_finite() => Err(EventError::NonFinite(name.into())),
        _ => Ok(()),
    }
}

/// Schemas by stream name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SchemaRegistry {
    schemas: BTreeMap<StreamName, EventSchema>,
}

impl SchemaRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, schema: EventSchema) {
        self.schemas.insert(schema.stream.clone(), schema);
    }

    pub fn get(&self, stream: &StreamName) -> Option<&EventSchema> {
        self.schemas.get(stream)
    }

    pub fn get_str(&self, stream: &str) -> Option<&EventSchema> {
        self.schemas.iter().find(|(k, _)| k.as_str() == stream).map(|(_, v)| v)
    }

    pub fn contains(&self, stream: &StreamName) -> bool {
        self.schemas.contains_key(stream)
    }

    pub fn iter(&self) -> impl Iterator<Item = &EventSchema> {
        self.schemas.values()
    }

    pub fn validate(&self, e: &Event) -> Result<(), EventError> {
        self.schema_for(&e.stream)?.validate(&e.fields)
    }

    fn schema_for(&self, stream: &StreamName) -> Result<&EventSchema, EventError> {
        self.get(stream)
            .ok_or_else(|| EventError::UnknownStream(stream.as_str().into()))
    }
}

impl FromIterator<EventSchema> for SchemaRegistry {
    fn from_iter<T: IntoIterator<Item = EventSchema>>(iter: T) -> Self {
        let mut r = SchemaRegistry::new();
        for s in iter {
            r.register(s);
        }
        r
    }
}

fn push_json_str(out: &mut String, s: &str) {
    // serde_json string escaping cannot fail for &str
    out.push_str(&serde_json::to_string(s).unwrap_or_default());
}

fn push_json_value(out: &mut String, v: &FieldValue) {
    match v {
        FieldValue::String(s) => push_json_str(out, s),
        other => out.push_str(&serde_json::to_string(&other.to_json()).unwrap_or_default()),
    }
}

fn push_envelope(out: &mut String, e: &Event) {
    out.push_str("{\"_stream\":");
    push_json_str(out, e.stream.as_str());
    out.push_str(",\"_ts\":");
    out.push_str(&e.timestamp.to_string());
    out.push_str(",\"_src\":");
    push_json_str(out, e.source.as_str());
}

/// Encodes an event against its registered schema.
pub fn encode_event(e: &Event, schemas: &SchemaRegistry) -> Result<Vec<u8>, EventError> {
    let schema = schemas.schema_for(&e.stream)?;
    let fields = schema.conform(&e.fields)?;
    Ok(encode_fields(e, &fields).into_bytes())
}

/// Encodes an event without a schema, keeping field insertion order.
pub fn encode_event_untyped(e: &Event) -> Vec<u8> {
    encode_fields(e, &e.fields).into_bytes()
}

fn encode_fields(e: &Event, fields: &Fields) -> String {
    let mut out = String::with_capacity(64 + fields.len() * 16);
    push_envelope(&mut out, e);
    for (name, value) in fields.iter() {
        out.push(',');
        push_json_str(&mut out, name);
        out.push(':');
        push_json_value(&mut out, value);
    }
    out.push('}');
    out
}

struct Envelope {
    stream: StreamName,
    timestamp: Timestamp,
    source: NodeId,
    rest: serde_json::Map<String, Value>,
}

fn parse_envelope(payload: &[u8]) -> Result<Envelope, EventError> {
    let value: Value = serde_json::from_slice(payload).map_err(|e| EventError::Malformed(e.to_string()))?;
    envelope_from_value(value)
}

fn envelope_from_value(value: Value) -> Result<Envelope, EventError> {
    let Value::Object(mut map) = value else {
        return Err(EventError::Malformed("expected a JSON object".into()));
    };
    let stream = match map.remove(KEY_STREAM) {
        Some(Value::String(s)) => StreamName::new(s)?,
        _ => return Err(EventError::Malformed("missing or non-string _stream".into())),
    };
    let timestamp = match map.remove(KEY_TS) {
        Some(Value::Number(n)) => n
            .as_u64()
            .ok_or_else(|| EventError::Malformed("_ts must be a non-negative integer".into()))?,
        _ => return Err(EventError::Malformed("missing or non-integer _ts".into())),
    };
    let source = match map.remove(KEY_SRC) {
        Some(Value::String(s)) => NodeId(s),
        _ => return Err(EventError::Malformed("missing or non-string _src".into())),
    };
    Ok(Envelope {
        stream,
        timestamp,
        source,
        rest: map,
    })
}

fn typed_value(name: &str, ty: FieldType, v: &Value) -> Result<FieldValue, EventError> {
    let mismatch = |found: &'static str| EventError::FieldType {
        field: name.into(),
        expected: ty.name(),
        found,
    };
    let out = match (ty, v) {
        (_, Value::Null) => FieldValue::Null,
        (FieldType::Number, Value::Number(n)) => FieldValue::Number(n.as_f64().ok_or_else(|| mismatch("number"))?),
        (FieldType::Integer, Value::Number(n)) => match n.as_i64() {
            Some(i) => FieldValue::Integer(i),
            None if n.is_u64() => return Err(EventError::IntegerRange(name.into())),
            None => return Err(mismatch("number")),
        },
        (FieldType::String, Value::String(s)) => FieldValue::String(s.clone()),
        (FieldType::Boolean, Value::Bool(b)) => FieldValue::Boolean(*b),
        (_, other) => return Err(mismatch(json_type_name(other))),
    };
    check_value(name, ty, &out)?;
    Ok(out)
}

fn json_type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(n) if n.is_f64() => "number",
        Value::Number(_) => "integer",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// Decodes a payload produced by [`encode_event`]; fields may arrive in any
/// order and come out in schema declaration order.
pub fn decode_event(payload: &[u8], schemas: &SchemaRegistry) -> Result<Event, EventError> {
    let env = parse_envelope(payload)?;
    let schema = schemas.schema_for(&env.stream)?;
    for key in env.rest.keys() {
        if schema.field_type(key).is_none() {
            return Err(EventError::UndeclaredField(key.clone()));
        }
    }
    let mut fields = Fields::new();
    for (name, ty) in &schema.fields {
        let raw = env
            .rest
            .get(name)
            .ok_or_else(|| EventError::MissingField(name.clone()))?;
        fields.0.push((name.clone(), typed_value(name, *ty, raw)?));
    }
    Ok(Event::new(env.stream, fields, env.timestamp, env.source))
}

/// Schema-less decode: JSON integers become `Integer`, other numbers `Number`.
/// Fields come out in key order.
pub fn decode_event_untyped(payload: &[u8]) -> Result<Event, EventError> {
    let value: Value = serde_json::from_slice(payload).map_err(|e| EventError::Malformed(e.to_string()))?;
    event_from_json_untyped(value)
}

pub(crate) fn event_from_json_untyped(value: Value) -> Result<Event, EventError> {
    let env = envelope_from_value(value)?;
    let mut fields = Fields::new();
    for (k, v) in &env.rest {
        let fv = FieldValue::from_json(v).ok_or_else(|| EventError::FieldType {
            field: k.clone(),
            expected: "scalar",
            found: json_type_name(v),
        })?;
        fields.0.push((k.clone(), fv));
    }
    Ok(Event::new(env.stream, fields, env.timestamp, env.source))
}

pub(crate) fn event_to_json_untyped(e: &Event) -> Value {
    let mut map = serde_json::Map::new();
    map.insert(KEY_STREAM.into(), Value::String(e.stream.as_str().into()));
    map.insert(KEY_TS.into(), Value::from(e.timestamp));
    map.insert(KEY_SRC.into(), Value::String(e.source.as_str().into()));
    for (k, v) in e.fields.iter() {
        map.insert(k.into(), v.to_json());
    }
    Value::Object(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn light_schema() -> SchemaRegistry {
        let s = EventSchema::new(
            StreamName::new("ExternalLight").unwrap(),
            vec![
                ("isOn".into(), FieldType::Boolean),
                ("floor".into(), FieldType::Integer),
            ],
        )
        .unwrap();
        core::iter::once(s).collect()
    }

    fn light(is_on: bool, floor: i64) -> Event {
        Event::new(
            StreamName::new("ExternalLight").unwrap(),
            Fields::from_pairs([("isOn", is_on.into()), ("floor", floor.into())]).unwrap(),
            1000,
            NodeId::new("e4"),
        )
    }

    #[test]
    fn encodes_external_light_golden() {
        let bytes = encode_event(&light(true, 3), &light_schema()).unwrap();
        assert_eq!(
            core::str::from_utf8(&bytes).unwrap(),
            r#"{"_stream":"ExternalLight","_ts":1000,"_src":"e4","isOn":true,"floor":3}"#
        );
    }

    #[test]
    fn empty_fields_only_carry_envelope() {
        let stream = StreamName::new("Tick").unwrap();
        let reg: SchemaRegistry = [EventSchema::new(stream.clone(), vec![]).unwrap()]
            .into_iter()
            .collect();
        let e = Event::new(stream, Fields::new(), 7, NodeId::new("f1"));
        let bytes = encode_event(&e, &reg).unwrap();
        assert_eq!(bytes, br#"{"_stream":"Tick","_ts":7,"_src":"f1"}"#);
        assert_eq!(decode_event(&bytes, &reg).unwrap(), e);
    }

    #[test]
    fn decode_accepts_any_key_order() {
        let reg = light_schema();
        let e = decode_event(
            br#"{"floor":3,"_src":"e4","isOn":true,"_ts":1000,"_stream":"ExternalLight"}"#,
            &reg,
        )
        .unwrap();
        assert_eq!(e, light(true, 3));
    }

    #[test]
    fn unknown_stream_is_rejected() {
        let err = decode_event(br#"{"_stream":"Unknown","_ts":1,"_src":"x"}"#, &light_schema()).unwrap_err();
        assert_eq!(err, EventError::UnknownStream("Unknown".into()));
    }

    #[test]
    fn string_in_integer_field_is_a_type_error() {
        let err = decode_event(
            br#"{"_stream":"ExternalLight","_ts":1,"_src":"e4","isOn":true,"floor":"3"}"#,
            &light_schema(),
        )
        .unwrap_err();
        assert!(matches!(err, EventError::FieldType { ref field, .. } if field == "floor"));
    }

    #[test]
    fn extra_and_missing_fields_are_rejected() {
        let reg = light_schema();
        let extra = br#"{"_stream":"ExternalLight","_ts":1,"_src":"e4","isOn":true,"floor":3,"room":"r1"}"#;
        assert_eq!(
            decode_event(extra, &reg).unwrap_err(),
            EventError::UndeclaredField("room".into())
        );
        let missing = br#"{"_stream":"ExternalLight","_ts":1,"_src":"e4","isOn":true}"#;
        assert_eq!(
            decode_event(missing, &reg).unwrap_err(),
            EventError::MissingField("floor".into())
        );
    }

    #[test]
    fn integers_beyond_two_pow_53_are_rejected() {
        let reg = light_schema();
        let mut e = light(true, 0);
        e.fields.set("floor", FieldValue::Integer(MAX_SAFE_INTEGER + 1));
        assert_eq!(
            encode_event(&e, &reg).unwrap_err(),
            EventError::IntegerRange("floor".into())
        );
        e.fields.set("floor", FieldValue::Integer(MAX_SAFE_INTEGER));
        assert!(encode_event(&e, &reg).is_ok());
    }

    #[test]
    fn encode_names_the_offending_field() {
        let mut e = light(true, 3);
        e.fields.set("isOn", FieldValue::String("yes".into()));
        match encode_event(&e, &light_schema()).unwrap_err() {
            EventError::FieldType { field, .. } => assert_eq!(field, "isOn"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn number_integer_coercion_in_compare() {
        let a = FieldValue::Integer(90);
        assert_eq!(a.compare(&FieldValue::Number(90.0)), Ok(Ordering::Equal));
        assert_eq!(a.compare(&FieldValue::Number(85.5)), Ok(Ordering::Greater));
        assert!(a.compare(&FieldValue::String("90".into())).is_err());
        assert!(FieldValue::Boolean(true).compare(&FieldValue::Integer(1)).is_err());
    }

    #[test]
    fn stream_names_must_be_identifiers() {
        assert!(StreamName::new("Medicine_2").is_ok());
        assert!(StreamName::new("_x").is_ok());
        assert!(StreamName::new("").is_err());
        assert!(StreamName::new("2fast").is_err());
        assert!(StreamName::new("a-b").is_err());
    }
}
