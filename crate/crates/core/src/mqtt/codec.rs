//! MQTT 3.1.1 wire codec for the packet subset used between tiers.

use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use super::topic::{valid_filter, valid_topic_name};

pub const MAX_REMAINING_LENGTH: u32 = 268_435_455;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("remaining length {0} exceeds the 4-byte varint range")]
    LengthOverflow(u32),
    #[error("malformed remaining length")]
    MalformedLength,
    #[error("unsupported feature: {0}")]
    Unsupported(&'static str),
    #[error("protocol violation: {0}")]
    Protocol(&'static str),
    #[error("malformed packet: {0}")]
    Malformed(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum QoS {
    AtMostOnce = 0,
    AtLeastOnce = 1,
}

impl QoS {
    pub fn from_u8(v: u8) -> Option<QoS> {
        match v {
            0 => Some(QoS::AtMostOnce),
            1 => Some(QoS::AtLeastOnce),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Connect {
    pub client_id: String,
    pub keep_alive: u16,
    pub clean_session: bool,
    pub username: Option<String>,
    pub password: Option<Vec<u8>>,
}

impl Connect {
    pub fn new(client_id: impl Into<String>, keep_alive: u16) -> Self {
        Connect {
            client_id: client_id.into(),
            keep_alive,
            clean_session: true,
            username: None,
            password: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Publish {
    pub topic: String,
    pub payload: Vec<u8>,
    pub qos: QoS,
    /// Present iff `qos` is `AtLeastOnce`; never zero.
    pub packet_id: Option<u16>,
    pub dup: bool,
}

impl Publish {
    pub fn at_most_once(topic: impl Into<String>, payload: impl Into<Vec<u8>>) -> Self {
        Publish {
            topic: topic.into(),
            payload: payload.into(),
            qos: QoS::AtMostOnce,
            packet_id: None,
            dup: false,
        }
    }

    pub fn at_least_once(topic: impl Into<String>, payload: impl Into<Vec<u8>>, id: u16) -> Self {
        Publish {
            topic: topic.into(),
            payload: payload.into(),
            qos: QoS::AtLeastOnce,
            packet_id: Some(id),
            dup: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubAckCode {
    Granted(QoS),
    Failure,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Packet {
    Connect(Connect),
    /// Return code; 0 is accepted.
    ConnAck(u8),
    Publish(Publish),
    PubAck(u16),
    Subscribe {
        packet_id: u16,
        filters: Vec<(String, QoS)>,
    },
    SubAck {
        packet_id: u16,
        codes: Vec<SubAckCode>,
    },
    PingReq,
    PingResp,
    Disconnect,
}

impl Packet {
    pub fn kind(&self) -> &'static str {
        match self {
            Packet::Connect(_) => "CONNECT",
            Packet::ConnAck(_) => "CONNACK",
            Packet::Publish(_) => "PUBLISH",
            Packet::PubAck(_) => "PUBACK",
            Packet::Subscribe { .. } => "SUBSCRIBE",
            Packet::SubAck { .. } => "SUBACK",
            Packet::PingReq => "PINGREQ",
            Packet::PingResp => "PINGRESP",
            Packet::Disconnect => "DISCONNECT",
        }
    }
}

/// MQTT fixed-header varint: 7 bits per byte, least significant group first.
pub fn encode_remaining_length(n: u32) -> Result<Vec<u8>, CodecError> {
    if n > MAX_REMAINING_LENGTH {
        return Err(CodecError::LengthOverflow(n));
    }
    let mut out = Vec::with_capacity(4);
    let mut x = n;
    loop {
        let mut byte = (x % 128) as u8;
        x /= 128;
        if x > 0 {
            byte |= 0x80;
        }
        out.push(byte);
        if x == 0 {
            return Ok(out);
        }
    }
}

/// Returns `(value, bytes consumed)` or `None` when more bytes are needed.
pub fn decode_remaining_length(b: &[u8]) -> Result<Option<(u32, usize)>, CodecError> {
    let mut value: u32 = 0;
    let mut multiplier: u32 = 1;
    for (i, byte) in b.iter().enumerate() {
        if i == 4 {
            return Err(CodecError::MalformedLength);
        }
        value += u32::from(byte & 0x7F) * multiplier;
        if byte & 0x80 == 0 {
            return Ok(Some((value, i + 1)));
        }
        multiplier *= 128;
    }
    if b.len() >= 4 {
        return Err(CodecError::MalformedLength);
    }
    Ok(None)
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_bytes(out, s.as_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u16).to_be_bytes());
    out.extend_from_slice(b);
}

fn frame(header: u8, body: Vec<u8>) -> Result<Vec<u8>, CodecError> {
    let len = encode_remaining_length(body.len() as u32)?;
    let mut out = Vec::with_capacity(1 + len.len() + body.len());
    out.push(header);
    out.extend_from_slice(&len);
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn encode_packet(p: &Packet) -> Result<Vec<u8>, CodecError> {
    match p {
        Packet::Connect(c) => {
            let mut body = Vec::with_capacity(16 + c.client_id.len());
            put_str(&mut body, "MQTT");
            body.push(4);
            let mut flags = 0u8;
            if c.clean_session {
                flags |= 0x02;
            }
            if c.username.is_some() {
                flags |= 0x80;
            }
            if c.password.is_some() {
                if c.username.is_none() {
                    return Err(CodecError::Protocol("password without username"));
                }
                flags |= 0x40;
            }
            body.push(flags);
            body.extend_from_slice(&c.keep_alive.to_be_bytes());
            put_str(&mut body, &c.client_id);
            if let Some(u) = &c.username {
                put_str(&mut body, u);
            }
            if let Some(pw) = &c.password {
                put_bytes(&mut body, pw);
            }
            frame(0x10, body)
        }
        Packet::ConnAck(code) => frame(0x20, alloc::vec![0, *code]),
        Packet::Publish(p) => {
            if !valid_topic_name(&p.topic) {
                return Err(CodecError::Protocol("invalid topic name"));
            }
            let mut header = 0x30 | ((p.qos as u8) << 1);
            if p.dup {
                header |= 0x08;
            }
            let mut body = Vec::with_capacity(4 + p.topic.len() + p.payload.len());
            put_str(&mut body, &p.topic);
            match (p.qos, p.packet_id) {
                (QoS::AtMostOnce, None) => {}
                (QoS::AtLeastOnce, Some(id)) if id != 0 => body.extend_from_slice(&id.to_be_bytes()),
                (QoS::AtMostOnce, Some(_)) => return Err(CodecError::Protocol("qos 0 publish with packet id")),
                _ => return Err(CodecError::Protocol("qos 1 publish without packet id")),
            }
            if p.qos == QoS::AtMostOnce && p.dup {
                return Err(CodecError::Protocol("dup flag on qos 0 publish"));
            }
            body.extend_from_slice(&p.payload);
            frame(header, body)
        }
        Packet::PubAck(id) => frame(0x40, id.to_be_bytes().to_vec()),
        Packet::Subscribe { packet_id, filters } => {
            if filters.is_empty() {
                return Err(CodecError::Protocol("subscribe without filters"));
            }
            let mut body = Vec::new();
            body.extend_from_slice(&packet_id.to_be_bytes());
            for (f, q) in filters {
                put_str(&mut body, f);
                body.push(*q as u8);
            }
            frame(0x82, body)
        }
        Packet::SubAck { packet_id, codes } => {
            let mut body = Vec::with_capacity(2 + codes.len());
            body.extend_from_slice(&packet_id.to_be_bytes());
            for c in codes {
                body.push(match c {
                    SubAckCode::Granted(q) => *q as u8,
                    SubAckCode::Failure => 0x80,
                });
            }
            frame(0x90, body)
        }
        Packet::PingReq => Ok(alloc::vec![0xC0, 0x00]),
        Packet::PingResp => Ok(alloc::vec![0xD0, 0x00]),
        Packet::Disconnect => Ok(alloc::vec![0xE0, 0x00]),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u8(&mut self) -> Result<u8, CodecError> {
        let b = *self.buf.get(self.pos).ok_or(CodecError::Malformed("truncated body"))?;
        self.pos += 1;
        Ok(b)
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_be_bytes([self.u8()?, self.u8()?]))
    }

    fn bytes(&mut self) -> Result<&'a [u8], CodecError> {
        let n = self.u16()? as usize;
        let end = self.pos + n;
        let out = self
            .buf
            .get(self.pos..end)
            .ok_or(CodecError::Malformed("truncated string"))?;
        self.pos = end;
        Ok(out)
    }

    fn string(&mut self) -> Result<String, CodecError> {
        let b = self.bytes()?;
        let s = core::str::from_utf8(b).map_err(|_| CodecError::Malformed("invalid utf-8"))?;
        if s.contains('\0') {
            return Err(CodecError::Malformed("NUL in string"));
        }
        Ok(s.into())
    }

    fn rest(&mut self) -> &'a [u8] {
        let out = &self.buf[self.pos..];
        self.pos = self.buf.len();
        out
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn expect_flags(header: u8, want: u8) -> Result<(), CodecError> {
    if header & 0x0F != want {
        return Err(CodecError::Malformed("reserved flag bits"));
    }
    Ok(())
}

/// Decodes one packet from the front of `b`. Returns `Ok(None)` when `b`
/// does not yet hold a complete packet.
pub fn decode_packet(b: &[u8]) -> Result<Option<(Packet, usize)>, CodecError> {
    let Some(&header) = b.first() else {
        return Ok(None);
    };
    let Some((len, len_bytes)) = decode_remaining_length(&b[1..])? else {
        return Ok(None);
    };
    let start = 1 + len_bytes;
    let end = start + len as usize;
    if b.len() < end {
        return Ok(None);
    }
    let mut r = Reader {
        buf: &b[start..end],
        pos: 0,
    };
    let packet = match header >> 4 {
        1 => {
            expect_flags(header, 0)?;
            let proto = r.string()?;
            let level = r.u8()?;
            if proto != "MQTT" || level != 4 {
                return Err(CodecError::Unsupported("protocol other than MQTT 3.1.1"));
            }
            let flags = r.u8()?;
            if flags & 0x01 != 0 {
                return Err(CodecError::Malformed("reserved connect flag"));
            }
            if flags & 0x04 != 0 {
                return Err(CodecError::Unsupported("will message"));
            }
            if flags & 0x40 != 0 && flags & 0x80 == 0 {
                return Err(CodecError::Protocol("password without username"));
            }
            let keep_alive = r.u16()?;
            let client_id = r.string()?;
            let username = if flags & 0x80 != 0 { Some(r.string()?) } else { None };
            let password = if flags & 0x40 != 0 {
                Some(r.bytes()?.to_vec())
            } else {
                None
            };
            Packet::Connect(Connect {
                client_id,
                keep_alive,
                clean_session: flags & 0x02 != 0,
                username,
                password,
            })
        }
        2 => {
            expect_flags(header, 0)?;
            let _session_present = r.u8()?;
            Packet::ConnAck(r.u8()?)
        }
        3 => {
            let dup = header & 0x08 != 0;
            let qos = match (header >> 1) & 0x03 {
                0 => QoS::AtMostOnce,
                1 => QoS::AtLeastOnce,
                2 => return Err(CodecError::Unsupported("QoS 2")),
                _ => return Err(CodecError::Malformed("QoS 3")),
            };
            // Retained messages are not supported; the flag is ignored.
            let topic = r.string()?;
            if !valid_topic_name(&topic) {
                return Err(CodecError::Protocol("invalid topic name"));
            }
            let packet_id = match qos {
                QoS::AtMostOnce => {
                    if dup {
                        return Err(CodecError::Protocol("dup flag on qos 0 publish"));
                    }
                    None
                }
                QoS::AtLeastOnce => {
                    let id = r.u16()?;
                    if id == 0 {
                        return Err(CodecError::Protocol("qos 1 publish without packet id"));
                    }
                    Some(id)
                }
            };
            Packet::Publish(Publish {
                topic,
                payload: r.rest().to_vec(),
                qos,
                packet_id,
                dup,
            })
        }
        4 => {
            expect_flags(header, 0)?;
            Packet::PubAck(r.u16()?)
        }
        5..=7 => return Err(CodecError::Unsupported("QoS 2 flow packet")),
        8 => {
            expect_flags(header, 0x02)?;
            let packet_id = r.u16()?;
            let mut filters = Vec::new();
            while !r.done() {
                let f = r.string()?;
                let q = match r.u8()? {
                    0 => QoS::AtMostOnce,
                    // QoS 2 requests are downgraded to the maximum we serve.
                    1 | 2 => QoS::AtLeastOnce,
                    _ => return Err(CodecError::Malformed("requested QoS")),
                };
                filters.push((f, q));
            }
            if filters.is_empty() {
                return Err(CodecError::Protocol("subscribe without filters"));
            }
            Packet::Subscribe { packet_id, filters }
        }
        9 => {
            expect_flags(header, 0)?;
            let packet_id = r.u16()?;
            let mut codes = Vec::new();
            while !r.done() {
                codes.push(match r.u8()? {
                    0 => SubAckCode::Granted(QoS::AtMostOnce),
                    1 => SubAckCode::Granted(QoS::AtLeastOnce),
                    0x80 => SubAckCode::Failure,
                    _ => return Err(CodecError::Unsupported("granted QoS 2")),
                });
            }
            Packet::SubAck { packet_id, codes }
        }
        10 | 11 => return Err(CodecError::Unsupported("unsubscribe")),
        12 => {
            expect_flags(header, 0)?;
            Packet::PingReq
        }
        13 => {
            expect_flags(header, 0)?;
            Packet::PingResp
        }
        14 => {
            expect_flags(header, 0)?;
            Packet::Disconnect
        }
        _ => return Err(CodecError::Unsupported("reserved packet type")),
    };
    if !r.done() {
        return Err(CodecError::Malformed("trailing bytes"));
    }
    Ok(Some((packet, end)))
}

/// Checks whether every filter in a subscribe is well formed.
pub fn filters_valid(filters: &[(String, QoS)]) -> Vec<bool> {
    filters.iter().map(|(f, _)| valid_filter(f)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn remaining_length_vectors() {
        assert_eq!(encode_remaining_length(0).unwrap(), vec![0x00]);
        assert_eq!(encode_remaining_length(127).unwrap(), vec![0x7F]);
        assert_eq!(encode_remaining_length(128).unwrap(), vec![0x80, 0x01]);
        assert_eq!(encode_remaining_length(321).unwrap(), vec![0xC1, 0x02]);
        assert_eq!(
            encode_remaining_length(268_435_455).unwrap(),
            vec![0xFF, 0xFF, 0xFF, 0x7F]
        );
        assert_eq!(
            encode_remaining_length(268_435_456),
            Err(CodecError::LengthOverflow(268_435_456))
        );
    }

    #[test]
    fn remaining_length_decode_is_inverse() {
        for n in [
            0u32,
            1,
            127,
            128,
            321,
            16_383,
            16_384,
            2_097_151,
            2_097_152,
            MAX_REMAINING_LENGTH,
        ] {
            let enc = encode_remaining_length(n).unwrap();
            assert_eq!(decode_remaining_length(&enc).unwrap(), Some((n, enc.len())));
        }
        assert_eq!(decode_remaining_length(&[0x80, 0x80]).unwrap(), None);
        assert_eq!(
            decode_remaining_length(&[0x80, 0x80, 0x80, 0x80, 0x01]),
            Err(CodecError::MalformedLength)
        );
    }

    #[test]
    fn partial_input_needs_more_bytes() {
        let bytes = encode_packet(&Packet::Publish(Publish::at_most_once("f1/in", "hello"))).unwrap();
        for cut in 0..bytes.len() {
            assert_eq!(decode_packet(&bytes[..cut]).unwrap(), None, "cut at {cut}");
        }
        assert!(decode_packet(&bytes).unwrap().is_some());
    }

    #[test]
    fn qos2_and_reserved_types_are_unsupported() {
        assert_eq!(
            decode_packet(&[0x34, 0x05, 0x00, 0x01, b'a', 0x00, 0x01]),
            Err(CodecError::Unsupported("QoS 2"))
        );
        assert_eq!(
            decode_packet(&[0x50, 0x02, 0x00, 0x01]),
            Err(CodecError::Unsupported("QoS 2 flow packet"))
        );
        assert_eq!(
            decode_packet(&[0xF0, 0x00]),
            Err(CodecError::Unsupported("reserved packet type"))
        );
        assert_eq!(
            decode_packet(&[0x00, 0x00]),
            Err(CodecError::Unsupported("reserved packet type"))
        );
    }

    #[test]
    fn qos1_without_packet_id_is_a_protocol_violation() {
        let p = Publish {
            topic: "a".into(),
            payload: vec![],
            qos: QoS::AtLeastOnce,
            packet_id: None,
            dup: false,
        };
        assert!(matches!(
            encode_packet(&Packet::Publish(p)),
            Err(CodecError::Protocol(_))
        ));
        assert!(matches!(
            decode_packet(&[0x32, 0x05, 0x00, 0x01, b'a', 0x00, 0x00]),
            Err(CodecError::Protocol(_))
        ));
    }

    #[test]
    fn wildcard_topic_in_publish_is_rejected() {
        assert!(encode_packet(&Packet::Publish(Publish::at_most_once("f1/+", "x"))).is_err());
        assert!(decode_packet(&[0x30, 0x05, 0x00, 0x02, b'a', b'#', b'x']).is_err());
    }

    #[test]
    fn retain_flag_is_ignored_on_decode() {
        let (p, n) = decode_packet(&[0x31, 0x04, 0x00, 0x01, b'a', b'x']).unwrap().unwrap();
        assert_eq!(n, 6);
        assert_eq!(p, Packet::Publish(Publish::at_most_once("a", "x")));
    }
}
