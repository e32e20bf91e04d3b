//! The five-field data packet and its canonical JSON wire form.
//!
//! This is the system's wire contract above MQTT: exactly the keys
//! `name, units, value, captured_at, protocol, node_id`, in that order, value
//! rendered to at most six significant digits. Everything that crosses a
//! link, lands in the store or exports to CSV uses this one rendering, so a
//! value survives the full pipeline bit-identically.

use crate::sim::Protocol;
use crate::Millis;
use serde::Deserialize;
use thiserror::Error;

/// One quantified measurement as transported and stored.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPacket {
    pub name: String,
    pub units: String,
    pub value: f64,
    pub captured_at: Millis,
    pub protocol: Protocol,
    pub node_id: String,
}

impl DataPacket {
    /// Topic this packet publishes to.
    pub fn topic(&self) -> String {
        format!("station/{}/{}", self.node_id, self.name)
    }

    /// Deduplication identity: at-least-once delivery collapses to
    /// exactly-once storage under this key.
    pub fn key(&self) -> (String, String, Millis) {
        (self.node_id.clone(), self.name.clone(), self.captured_at)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("parse error at byte {offset}: {message}")]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
}

/// Renders a value with at most six significant digits (and at most six
/// decimal places), trimming trailing zeros. Plain decimal, no exponent.
pub fn format_value(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).clamp(0, 6) as usize;
    let rendered = format!("{v:.decimals$}");
    if rendered.contains('.') {
        rendered.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        rendered
    }
}

/// The exact f64 a value becomes after one trip through the wire rendering.
pub fn quantize_value(v: f64) -> f64 {
    format_value(v).parse().expect("format_value emits a valid number")
}

/// Canonical JSON, fixed key order.
pub fn serialize_packet(p: &DataPacket) -> Result<Vec<u8>, ParseError> {
    if !p.value.is_finite() {
        return Err(ParseError { offset: 0, message: format!("non-finite value {}", p.value) });
    }
    let out = format!(
        "{{\"name\":{},\"units\":{},\"value\":{},\"captured_at\":{},\"protocol\":\"{}\",\"node_id\":{}}}",
        serde_json::to_string(&p.name).unwrap(),
        serde_json::to_string(&p.units).unwrap(),
        format_value(p.value),
        p.captured_at,
        p.protocol,
        serde_json::to_string(&p.node_id).unwrap(),
    );
    Ok(out.into_bytes())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WirePacket {
    name: String,
    units: String,
    value: f64,
    captured_at: Millis,
    protocol: Protocol,
    node_id: String,
}

/// Inverse of [`serialize_packet`]; rejects unknown and missing keys.
pub fn parse_packet(bytes: &[u8]) -> Result<DataPacket, ParseError> {
    let text = std::str::from_utf8(bytes).map_err(|e| ParseError {
        offset: e.valid_up_to(),
        message: "payload is not UTF-8".to_string(),
    })?;
    let wire: WirePacket = serde_json::from_str(text).map_err(|e| ParseError {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    Ok(DataPacket {
        name: wire.name,
        units: wire.units,
        value: wire.value,
        captured_at: wire.captured_at,
        protocol: wire.protocol,
        node_id: wire.node_id,
    })
}

/// serde_json reports line/column; translate to a byte offset.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut offset = 0;
    for (i, l) in text.split('\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1).min(l.len());
        }
        offset += l.len() + 1;
    }
    text.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensor::VariableKind;

    fn packet() -> DataPacket {
        DataPacket {
            name: "temperature".into(),
            units: "C".into(),
            value: 27.7,
            captured_at: 1000,
            protocol: Protocol::Zigbee,
            node_id: "n1".into(),
        }
    }

    #[test]
    fn fixture_round_trip() {
        let json = br#"{"name":"temperature","units":"C","value":27.7,"captured_at":1000,"protocol":"zigbee","node_id":"n1"}"#;
        assert_eq!(parse_packet(json).unwrap(), packet());
        assert_eq!(serialize_packet(&packet()).unwrap(), json.to_vec());
    }

    #[test]
    fn missing_key_rejected() {
        let json = br#"{"name":"temperature","value":27.7,"captured_at":1000,"protocol":"zigbee","node_id":"n1"}"#;
        let err = parse_packet(json).unwrap_err();
        assert!(err.message.contains("units"), "{}", err.message);
    }

    #[test]
    fn unknown_key_rejected() {
        let json = br#"{"name":"temperature","units":"C","value":27.7,"captured_at":1000,"protocol":"zigbee","node_id":"n1","extra":1}"#;
        assert!(parse_packet(json).is_err());
    }

    #[test]
    fn unknown_protocol_rejected() {
        let json = br#"{"name":"temperature","units":"C","value":27.7,"captured_at":1000,"protocol":"lora","node_id":"n1"}"#;
        assert!(parse_packet(json).is_err());
    }

    #[test]
    fn parse_error_carries_byte_offset() {
        let json = br#"{"name":"temperature","units":"C","value":nope}"#;
        let err = parse_packet(json).unwrap_err();
        assert!(err.offset > 0 && err.offset < json.len());
    }

    #[test]
    fn value_rendering() {
        assert_eq!(format_value(0.0), "0");
        assert_eq!(format_value(-0.0), "0");
        assert_eq!(format_value(27.7), "27.7");
        assert_eq!(format_value(0.2794), "0.2794");
        assert_eq!(format_value(1796.4071856287426), "1796.41");
        assert_eq!(format_value(100.0), "100");
        assert_eq!(format_value(-10.0), "-10");
        assert_eq!(format_value(337.5), "337.5");
        assert_eq!(format_value(0.00167), "0.00167");
        assert_eq!(format_value(99.99999), "100");
    }

    #[test]
    fn quantized_values_round_trip_exactly() {
        let mut state = 0xD1B54A32D192ED03u64;
        for _ in 0..2000 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let raw = ((state >> 11) as f64 / (1u64 << 53) as f64) * 4000.0 - 1000.0;
            let mut p = packet();
            p.value = quantize_value(raw);
            let bytes = serialize_packet(&p).unwrap();
            let parsed = parse_packet(&bytes).unwrap();
            assert_eq!(parsed, p, "raw {raw}");
            // Idempotent: a second trip is bit-identical.
            assert_eq!(serialize_packet(&parsed).unwrap(), bytes);
        }
    }

    #[test]
    fn worst_case_payload_fits_zigbee_frame() {
        // Exhaustive worst-case rendering: the longest name/units pair, the
        // widest in-domain value, a 13-digit wall-clock timestamp, the
        // longest protocol name and the longest permitted node id.
        let worst_value = |kind: VariableKind| -> f64 {
            match kind {
                VariableKind::Temperature => -3276.7, // widest the frame can encode
                VariableKind::Humidity => 99.9999,
                VariableKind::SolarRadiation => 1886.23, // span + slack over the scale
                VariableKind::Precipitation => 999.999,
                VariableKind::WindSpeed => 999.999,
                VariableKind::WindDirection => 337.5,
            }
        };
        for kind in VariableKind::ALL {
            let p = DataPacket {
                name: kind.name().into(),
                units: kind.unit().into(),
                value: quantize_value(worst_value(kind)),
                captured_at: 9_999_999_999_999,
                protocol: Protocol::Bluetooth,
                node_id: "macondo".into(), // 7 chars, the NodeConfig cap
            };
            let size = serialize_packet(&p).unwrap().len();
            assert!(size <= 128, "{kind}: {size} octets");
        }
    }
}
