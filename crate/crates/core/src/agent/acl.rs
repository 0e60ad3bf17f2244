//! Agent messages, their JSON form and length-prefixed framing.

use alloc::collections::VecDeque;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde_json::{Map, Value};
use thiserror::Error;

use crate::event::{event_from_json_untyped, event_to_json_untyped, Event, Timestamp};

/// Frames larger than this are rejected by the decoder.
pub const MAX_FRAME: usize = 1 << 24;

/// Receiver name that addresses every other agent in the sender's group.
pub const BROADCAST: &str = "BROADCAST";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Performative {
    #[default]
    Inform,
    Request,
}

impl Performative {
    pub fn as_str(self) -> &'static str {
        match self {
            Performative::Inform => "INFORM",
            Performative::Request => "REQUEST",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Receivers {
    Broadcast,
    To(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AclMessage {
    pub performative: Performative,
    pub sender: String,
    pub receivers: Receivers,
    pub content: Event,
    pub sent_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AclError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("frame of {0} bytes exceeds the limit")]
    FrameTooLarge(usize),
}

impl AclMessage {
    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        m.insert("performative".into(), Value::String(self.performative.as_str().into()));
        m.insert("sender".into(), Value::String(self.sender.clone()));
        m.insert(
            "receivers".into(),
            match &self.receivers {
                Receivers::Broadcast => Value::String(BROADCAST.into()),
                Receivers::To(r) => Value::Array(r.iter().cloned().map(Value::String).collect()),
            },
        );
        m.insert("content".into(), event_to_json_untyped(&self.content));
        m.insert("sent_at".into(), Value::from(self.sent_at));
        Value::Object(m)
    }

    pub fn from_json(v: Value) -> Result<AclMessage, AclError> {
        let bad = |s: &str| AclError::Malformed(s.into());
        let Value::Object(mut m) = v else {
            return Err(bad("expected an object"));
        };
        let performative = match m.get("performative").and_then(Value::as_str) {
            Some("INFORM") => Performative::Inform,
            Some("REQUEST") => Performative::Request,
            _ => return Err(bad("performative must be INFORM or REQUEST")),
        };
        let sender = m
            .get("sender")
            .and_then(Value::as_str)
            .ok_or_else(|| bad("missing sender"))?
            .to_string();
        let receivers = match m.get("receivers") {
            Some(Value::String(s)) if s == BROADCAST => Receivers::Broadcast,
            Some(Value::Array(a)) => Receivers::To(
                a.iter()
                    .map(|r| r.as_str().map(String::from))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| bad("receivers must be strings"))?,
            ),
            _ => return Err(bad("receivers must be BROADCAST or a list")),
        };
        if receivers == Receivers::To(Vec::new()) {
            return Err(bad("receivers must not be empty"));
        }
        let sent_at = m
            .get("sent_at")
            .and_then(Value::as_u64)
            .ok_or_else(|| bad("missing sent_at"))?;
        let content = m.remove("content").ok_or_else(|| bad("missing content"))?;
        let content = event_from_json_untyped(content).map_err(|e| AclError::Malformed(e.to_string()))?;
        Ok(AclMessage {
            performative,
            sender,
            receivers,
            content,
            sent_at,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(&self.to_json()).expect("JSON values serialize")
    }

    pub fn decode(bytes: &[u8]) -> Result<AclMessage, AclError> {
        let v: Value = serde_json::from_slice(bytes).map_err(|e| AclError::Malformed(e.to_string()))?;
        AclMessage::from_json(v)
    }
}

/// Prefixes `payload` with its length as a 4-byte big-endian integer.
pub fn frame(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + 4);
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    out
}

/// Reassembles frames from an arbitrarily split byte stream.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: VecDeque<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend(bytes);
    }

    /// Next complete frame, if one is buffered.
    pub fn next_frame(&mut self) -> Result<Option<Vec<u8>>, AclError> {
        if self.buf.len() < 4 {
            return Ok(None);
        }
        let mut len = [0u8; 4];
        for (i, b) in self.buf.iter().take(4).enumerate() {
            len[i] = *b;
        }
        let len = u32::from_be_bytes(len) as usize;
        if len > MAX_FRAME {
            return Err(AclError::FrameTooLarge(len));
        }
        if self.buf.len() < 4 + len {
            return Ok(None);
        }
        self.buf.drain(..4);
        Ok(Some(self.buf.drain(..len).collect()))
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{FieldValue, Fields, NodeId, StreamName};
    use alloc::vec;

    fn msg(receivers: Receivers) -> AclMessage {
        AclMessage {
            performative: Performative::Request,
            sender: "e2.light".into(),
            receivers,
            content: Event::new(
                StreamName::new("O2Level").unwrap(),
                [("value", FieldValue::Integer(85))].into_iter().collect::<Fields>(),
                40,
                NodeId::new("e2"),
            ),
            sent_at: 41,
        }
    }

    #[test]
    fn json_round_trip() {
        for r in [Receivers::Broadcast, Receivers::To(vec!["a".into(), "b".into()])] {
            let m = msg(r);
            assert_eq!(AclMessage::decode(&m.encode()), Ok(m));
        }
        assert!(AclMessage::decode(br#"{"performative":"CFP"}"#).is_err());
        let mut empty = msg(Receivers::To(vec![])).to_json();
        assert!(AclMessage::from_json(empty.take()).is_err());
    }

    #[test]
    fn frames_survive_any_split() {
        let a = msg(Receivers::Broadcast).encode();
        let b = b"second".to_vec();
        let mut wire = frame(&a);
        wire.extend(frame(&b));
        for cut in 0..wire.len() {
            let mut d = FrameDecoder::new();
            let mut got = Vec::new();
            for part in [&wire[..cut], &wire[cut..]] {
                d.push(part);
                while let Some(f) = d.next_frame().unwrap() {
                    got.push(f);
                }
            }
            assert_eq!(got, vec![a.clone(), b.clone()]);
            assert_eq!(d.buffered(), 0);
        }
    }

    #[test]
    fn oversized_frames_are_rejected() {
        let mut d = FrameDecoder::new();
        d.push(&u32::MAX.to_be_bytes());
        assert_eq!(d.next_frame(), Err(AclError::FrameTooLarge(u32::MAX as usize)));
    }
}
