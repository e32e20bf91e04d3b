//! Octet-exact encoder/decoder for the MQTT 3.1.1 control-packet subset.
//!
//! Decoding distinguishes `Truncated` (a resume signal: feed more octets and
//! retry) from `Malformed` (a protocol violation: the connection must close).

use super::topic::{valid_filter, valid_topic};
use thiserror::Error;

/// Largest value the 4-octet variable-length remaining-length field can carry.
pub const MAX_REMAINING_LENGTH: u32 = 268_435_455;

const PROTOCOL_NAME: &[u8] = b"MQTT";
const PROTOCOL_LEVEL: u8 = 0x04;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum QoS {
    AtMostOnce = 0,
    AtLeastOnce = 1,
}

impl QoS {
    pub fn from_bits(bits: u8) -> Option<QoS> {
        match bits {
            0 => Some(QoS::AtMostOnce),
            1 => Some(QoS::AtLeastOnce),
            _ => None,
        }
    }

    pub fn bits(self) -> u8 {
        self as u8
    }
}

/// Decoded control packet (the supported subset).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MqttPacket {
    Connect {
        client_id: String,
        keep_alive_s: u16,
        clean_session: bool,
    },
    ConnAck {
        return_code: u8,
    },
    Publish {
        topic: String,
        payload: Vec<u8>,
        qos: QoS,
        /// Present exactly when qos is 1.
        packet_id: Option<u16>,
        dup: bool,
        retain: bool,
    },
    PubAck {
        packet_id: u16,
    },
    Subscribe {
        packet_id: u16,
        filters: Vec<(String, QoS)>,
    },
    SubAck {
        packet_id: u16,
        granted: Vec<u8>,
    },
    PingReq,
    PingResp,
    Disconnect,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    /// More octets are needed; not a failure.
    #[error("packet truncated, need more octets")]
    Truncated,
    /// Protocol violation; the connection must close.
    #[error("malformed packet: {0}")]
    Malformed(&'static str),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodeError {
    #[error("packet violates an invariant: {0}")]
    InvariantViolation(&'static str),
    #[error("remaining length {0} exceeds the protocol maximum")]
    OutOfRange(u64),
}

/// Encodes `n` as the 7-bits-per-octet variable-length integer, least
/// significant group first, continuation bit on all but the last octet.
pub fn encode_remaining_length(n: u32) -> Result<Vec<u8>, EncodeError> {
    if n > MAX_REMAINING_LENGTH {
        return Err(EncodeError::OutOfRange(u64::from(n)));
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
            break;
        }
    }
    Ok(out)
}

/// Inverse of [`encode_remaining_length`]; returns the value and the octet
/// count consumed (at most 4).
pub fn decode_remaining_length(bytes: &[u8]) -> Result<(u32, usize), DecodeError> {
    let mut value: u32 = 0;
    let mut multiplier: u32 = 1;
    for i in 0..4 {
        let Some(&byte) = bytes.get(i) else {
            return Err(DecodeError::Truncated);
        };
        value += u32::from(byte & 0x7F) * multiplier;
        if byte & 0x80 == 0 {
            return Ok((value, i + 1));
        }
        if i == 3 {
            return Err(DecodeError::Malformed("remaining length longer than 4 octets"));
        }
        multiplier *= 128;
    }
    unreachable!()
}

fn put_string(out: &mut Vec<u8>, s: &str) -> Result<(), EncodeError> {
    let bytes = s.as_bytes();
    if bytes.len() > usize::from(u16::MAX) {
        return Err(EncodeError::InvariantViolation("string longer than 65535 octets"));
    }
    out.extend_from_slice(&(bytes.len() as u16).to_be_bytes());
    out.extend_from_slice(bytes);
    Ok(())
}

fn require_packet_id(id: u16) -> Result<u16, EncodeError> {
    if id == 0 {
        return Err(EncodeError::InvariantViolation("packet id must be nonzero"));
    }
    Ok(id)
}

/// Serializes one packet: fixed header, remaining length, variable header and
/// payload, per MQTT 3.1.1.
pub fn encode_packet(packet: &MqttPacket) -> Result<Vec<u8>, EncodeError> {
    let mut body = Vec::new();
    let first_byte: u8 = match packet {
        MqttPacket::Connect { client_id, keep_alive_s, clean_session } => {
            if client_id.is_empty() {
                return Err(EncodeError::InvariantViolation("empty client id"));
            }
            put_string(&mut body, std::str::from_utf8(PROTOCOL_NAME).unwrap())?;
            body.push(PROTOCOL_LEVEL);
            body.push(if *clean_session { 0x02 } else { 0x00 });
            body.extend_from_slice(&keep_alive_s.to_be_bytes());
            put_string(&mut body, client_id)?;
            0x10
        }
        MqttPacket::ConnAck { return_code } => {
            body.push(0x00); // session present: never, sessions are clean
            body.push(*return_code);
            0x20
        }
        MqttPacket::Publish { topic, payload, qos, packet_id, dup, retain } => {
            if !valid_topic(topic) {
                return Err(EncodeError::InvariantViolation("invalid publish topic"));
            }
            match (qos, packet_id) {
                (QoS::AtMostOnce, None) => {
                    if *dup {
                        return Err(EncodeError::InvariantViolation("dup flag on qos-0 publish"));
                    }
                }
                (QoS::AtLeastOnce, Some(id)) => {
                    require_packet_id(*id)?;
                }
                _ => {
                    return Err(EncodeError::InvariantViolation(
                        "packet id present iff qos is 1",
                    ))
                }
            }
            put_string(&mut body, topic)?;
            if let Some(id) = packet_id {
                body.extend_from_slice(&id.to_be_bytes());
            }
            body.extend_from_slice(payload);
            0x30 | (u8::from(*dup) << 3) | (qos.bits() << 1) | u8::from(*retain)
        }
        MqttPacket::PubAck { packet_id } => {
            body.extend_from_slice(&require_packet_id(*packet_id)?.to_be_bytes());
            0x40
        }
        MqttPacket::Subscribe { packet_id, filters } => {
            if filters.is_empty() {
                return Err(EncodeError::InvariantViolation("subscribe with no filters"));
            }
            body.extend_from_slice(&require_packet_id(*packet_id)?.to_be_bytes());
            for (filter, qos) in filters {
                if !valid_filter(filter) {
                    return Err(EncodeError::InvariantViolation("invalid topic filter"));
                }
                put_string(&mut body, filter)?;
                body.push(qos.bits());
            }
            0x82
        }
        MqttPacket::SubAck { packet_id, granted } => {
            if granted.is_empty() {
                return Err(EncodeError::InvariantViolation("suback with no return codes"));
            }
            if granted.iter().any(|&g| g > 1 && g != 0x80) {
                return Err(EncodeError::InvariantViolation("suback return code not 0, 1 or 0x80"));
            }
            body.extend_from_slice(&require_packet_id(*packet_id)?.to_be_bytes());
            body.extend_from_slice(granted);
            0x90
        }
        MqttPacket::PingReq => 0xC0,
        MqttPacket::PingResp => 0xD0,
        MqttPacket::Disconnect => 0xE0,
    };
    let len = u32::try_from(body.len()).map_err(|_| EncodeError::OutOfRange(body.len() as u64))?;
    let mut out = Vec::with_capacity(1 + 4 + body.len());
    out.push(first_byte);
    out.extend_from_slice(&encode_remaining_length(len)?);
    out.extend_from_slice(&body);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u8(&mut self) -> Result<u8, DecodeError> {
        let b = *self.buf.get(self.pos).ok_or(DecodeError::Malformed("body shorter than declared"))?;
        self.pos += 1;
        Ok(b)
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from(self.u8()?) << 8 | u16::from(self.u8()?))
    }

    fn string(&mut self) -> Result<String, DecodeError> {
        let len = usize::from(self.u16()?);
        let end = self.pos + len;
        let bytes = self
            .buf
            .get(self.pos..end)
            .ok_or(DecodeError::Malformed("string runs past the body"))?;
        self.pos = end;
        String::from_utf8(bytes.to_vec()).map_err(|_| DecodeError::Malformed("string is not UTF-8"))
    }

    fn rest(&mut self) -> Vec<u8> {
        let out = self.buf[self.pos..].to_vec();
        self.pos = self.buf.len();
        out
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn nonzero_packet_id(id: u16) -> Result<u16, DecodeError> {
    if id == 0 {
        return Err(DecodeError::Malformed("packet id must be nonzero"));
    }
    Ok(id)
}

/// Decodes exactly one packet from the front of `bytes`, returning it and the
/// octet count consumed; trailing octets are untouched.
pub fn decode_packet(bytes: &[u8]) -> Result<(MqttPacket, usize), DecodeError> {
    let Some(&first) = bytes.first() else {
        return Err(DecodeError::Truncated);
    };
    let (remaining, header_len) = decode_remaining_length(&bytes[1..])?;
    let body_start = 1 + header_len;
    let body_end = body_start + remaining as usize;
    if bytes.len() < body_end {
        return Err(DecodeError::Truncated);
    }
    let packet_type = first >> 4;
    let flags = first & 0x0F;
    let mut r = Reader { buf: &bytes[body_start..body_end], pos: 0 };

    let packet = match packet_type {
        1 => {
            if flags != 0 {
                return Err(DecodeError::Malformed("connect flags nibble must be 0"));
            }
            let name = r.string()?;
            if name.as_bytes() != PROTOCOL_NAME {
                return Err(DecodeError::Malformed("protocol name must be MQTT"));
            }
            if r.u8()? != PROTOCOL_LEVEL {
                return Err(DecodeError::Malformed("unsupported protocol level"));
            }
            let connect_flags = r.u8()?;
            if connect_flags & 0x01 != 0 {
                return Err(DecodeError::Malformed("connect reserved flag must be 0"));
            }
            if connect_flags & !0x02 != 0 {
                return Err(DecodeError::Malformed(
                    "wills and credentials are outside the supported subset",
                ));
            }
            let keep_alive_s = r.u16()?;
            let client_id = r.string()?;
            if client_id.is_empty() {
                return Err(DecodeError::Malformed("empty client id"));
            }
            MqttPacket::Connect {
                client_id,
                keep_alive_s,
                clean_session: connect_flags & 0x02 != 0,
            }
        }
        2 => {
            if flags != 0 {
                return Err(DecodeError::Malformed("connack flags nibble must be 0"));
            }
            let ack_flags = r.u8()?;
            if ack_flags & !0x01 != 0 {
                return Err(DecodeError::Malformed("connack acknowledge flags"));
            }
            MqttPacket::ConnAck { return_code: r.u8()? }
        }
        3 => {
            let dup = flags & 0x08 != 0;
            let retain = flags & 0x01 != 0;
            let qos = QoS::from_bits((flags >> 1) & 0x03)
                .ok_or(DecodeError::Malformed("publish qos above 1 is unsupported"))?;
            if qos == QoS::AtMostOnce && dup {
                return Err(DecodeError::Malformed("dup flag on qos-0 publish"));
            }
            let topic = r.string()?;
            if !valid_topic(&topic) {
                return Err(DecodeError::Malformed("publish topic invalid or has wildcards"));
            }
            let packet_id = match qos {
                QoS::AtMostOnce => None,
                QoS::AtLeastOnce => Some(nonzero_packet_id(r.u16()?)?),
            };
            MqttPacket::Publish { topic, payload: r.rest(), qos, packet_id, dup, retain }
        }
        4 => {
            if flags != 0 {
                return Err(DecodeError::Malformed("puback flags nibble must be 0"));
            }
            MqttPacket::PubAck { packet_id: nonzero_packet_id(r.u16()?)? }
        }
        8 => {
            if flags != 0x02 {
                return Err(DecodeError::Malformed("subscribe flags nibble must be 0010"));
            }
            let packet_id = nonzero_packet_id(r.u16()?)?;
            let mut filters = Vec::new();
            while !r.done() {
                let filter = r.string()?;
                if !valid_filter(&filter) {
                    return Err(DecodeError::Malformed("invalid topic filter"));
                }
                let qos = QoS::from_bits(r.u8()?)
                    .ok_or(DecodeError::Malformed("subscribe qos above 1 is unsupported"))?;
                filters.push((filter, qos));
            }
            if filters.is_empty() {
                return Err(DecodeError::Malformed("subscribe with no filters"));
            }
            MqttPacket::Subscribe { packet_id, filters }
        }
        9 => {
            if flags != 0 {
                return Err(DecodeError::Malformed("suback flags nibble must be 0"));
            }
            let packet_id = nonzero_packet_id(r.u16()?)?;
            let granted = r.rest();
            if granted.is_empty() {
                return Err(DecodeError::Malformed("suback with no return codes"));
            }
            if granted.iter().any(|&g| g > 1 && g != 0x80) {
                return Err(DecodeError::Malformed("suback return code not 0, 1 or 0x80"));
            }
            MqttPacket::SubAck { packet_id, granted }
        }
        12 | 13 | 14 => {
            if flags != 0 {
                return Err(DecodeError::Malformed("flags nibble must be 0"));
            }
            if remaining != 0 {
                return Err(DecodeError::Malformed("packet must have no body"));
            }
            match packet_type {
                12 => MqttPacket::PingReq,
                13 => MqttPacket::PingResp,
                _ => MqttPacket::Disconnect,
            }
        }
        _ => {
            return Err(DecodeError::Malformed(
                "packet type reserved or outside the supported subset",
            ))
        }
    };
    if !r.done() {
        return Err(DecodeError::Malformed("trailing octets inside the declared body"));
    }
    Ok((packet, body_end))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn varint_golden() {
        assert_eq!(encode_remaining_length(0).unwrap(), [0x00]);
        assert_eq!(encode_remaining_length(128).unwrap(), [0x80, 0x01]);
        assert_eq!(encode_remaining_length(321).unwrap(), [0xC1, 0x02]);
        assert_eq!(decode_remaining_length(&[0x00]).unwrap(), (0, 1));
        assert_eq!(decode_remaining_length(&[0xC1, 0x02]).unwrap(), (321, 2));
        assert!(matches!(
            decode_remaining_length(&[0xFF, 0xFF, 0xFF, 0xFF]),
            Err(DecodeError::Malformed(_))
        ));
        assert_eq!(decode_remaining_length(&[0x80]), Err(DecodeError::Truncated));
        assert!(encode_remaining_length(MAX_REMAINING_LENGTH + 1).is_err());
    }

    #[test]
    fn varint_round_trip_boundaries() {
        for n in [0u32, 127, 128, 16_383, 16_384, 2_097_151, 2_097_152, 268_435_455] {
            let encoded = encode_remaining_length(n).unwrap();
            assert_eq!(decode_remaining_length(&encoded).unwrap(), (n, encoded.len()));
        }
    }

    #[test]
    fn varint_decode_of_encode_sweep() {
        // Independent oracle: decode-of-encode over a dense range.
        for n in 0..100_000u32 {
            let encoded = encode_remaining_length(n).unwrap();
            assert_eq!(decode_remaining_length(&encoded).unwrap(), (n, encoded.len()));
        }
    }

    #[test]
    fn pingreq_is_two_octets() {
        assert_eq!(encode_packet(&MqttPacket::PingReq).unwrap(), [0xC0, 0x00]);
        assert_eq!(decode_packet(&[0xC0, 0x00]).unwrap(), (MqttPacket::PingReq, 2));
    }

    #[test]
    fn publish_qos1_first_octet() {
        let p = MqttPacket::Publish {
            topic: "station/n1/humidity".into(),
            payload: b"x".to_vec(),
            qos: QoS::AtLeastOnce,
            packet_id: Some(7),
            dup: false,
            retain: false,
        };
        assert_eq!(encode_packet(&p).unwrap()[0], 0x32);
    }

    #[test]
    fn empty_input_is_truncated() {
        assert_eq!(decode_packet(&[]), Err(DecodeError::Truncated));
    }

    #[test]
    fn reserved_type_is_malformed() {
        assert!(matches!(decode_packet(&[0xF0, 0x00]), Err(DecodeError::Malformed(_))));
        assert!(matches!(decode_packet(&[0x00, 0x00]), Err(DecodeError::Malformed(_))));
    }

    #[test]
    fn truncated_body_is_resume_signal() {
        let bytes = encode_packet(&MqttPacket::PubAck { packet_id: 9 }).unwrap();
        for cut in 0..bytes.len() {
            assert_eq!(decode_packet(&bytes[..cut]), Err(DecodeError::Truncated), "cut {cut}");
        }
        assert!(decode_packet(&bytes).is_ok());
    }

    #[test]
    fn trailing_octets_untouched() {
        let mut bytes = encode_packet(&MqttPacket::PingResp).unwrap();
        bytes.extend_from_slice(&[0xC0, 0x00]);
        let (packet, consumed) = decode_packet(&bytes).unwrap();
        assert_eq!(packet, MqttPacket::PingResp);
        assert_eq!(consumed, 2);
    }

    #[test]
    fn connect_round_trip() {
        let p = MqttPacket::Connect {
            client_id: "n1".into(),
            keep_alive_s: 60,
            clean_session: true,
        };
        let bytes = encode_packet(&p).unwrap();
        assert_eq!(decode_packet(&bytes).unwrap(), (p, bytes.len()));
    }

    #[test]
    fn qos2_publish_rejected() {
        // type 3, qos bits = 2.
        let bytes = [0x34, 0x05, 0x00, 0x01, b'a', 0x00, 0x01];
        assert!(matches!(decode_packet(&bytes), Err(DecodeError::Malformed(_))));
    }

    #[test]
    fn wildcard_publish_topic_rejected() {
        let p = MqttPacket::Publish {
            topic: "station/+/humidity".into(),
            payload: vec![],
            qos: QoS::AtMostOnce,
            packet_id: None,
            dup: false,
            retain: false,
        };
        assert!(encode_packet(&p).is_err());
    }

    #[test]
    fn packet_id_zero_rejected() {
        assert!(encode_packet(&MqttPacket::PubAck { packet_id: 0 }).is_err());
        let bytes = [0x40, 0x02, 0x00, 0x00];
        assert!(matches!(decode_packet(&bytes), Err(DecodeError::Malformed(_))));
    }
}
