//! Combined humidity + temperature read frame of the AM2315 sensor.
//!
//! Layout of the 8-octet response: function code 0x03, byte count 0x04, two
//! big-endian 16-bit data words (humidity x10, temperature x10 with the sign
//! carried in the top bit, not two's complement), then the CRC-16 of the
//! first six octets, least-significant octet first.

use super::crc::crc16;
use super::SensorError;
use super::VariableKind;

pub const FRAME_LEN: usize = 8;
const FUNCTION_READ: u8 = 0x03;
const DATA_BYTES: u8 = 0x04;

/// An 8-octet combined-read response frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Am2315Frame(pub [u8; FRAME_LEN]);

impl Am2315Frame {
    pub fn from_bytes(bytes: &[u8]) -> Option<Am2315Frame> {
        let arr: [u8; FRAME_LEN] = bytes.try_into().ok()?;
        Some(Am2315Frame(arr))
    }

    pub fn as_bytes(&self) -> &[u8; FRAME_LEN] {
        &self.0
    }
}

/// Decodes a frame into (humidity %, temperature C). CRC is verified first,
/// then the header, then the humidity range.
pub fn decode_am2315(frame: &Am2315Frame) -> Result<(f64, f64), SensorError> {
    let b = &frame.0;
    let computed = crc16(&b[..6]);
    let stored = u16::from(b[6]) | (u16::from(b[7]) << 8);
    if computed != stored {
        return Err(SensorError::CrcMismatch { computed, stored });
    }
    if b[0] != FUNCTION_READ || b[1] != DATA_BYTES {
        return Err(SensorError::BadHeader { function: b[0], count: b[1] });
    }
    let raw_humidity = u16::from_be_bytes([b[2], b[3]]);
    let humidity = f64::from(raw_humidity) / 10.0;
    if humidity > 100.0 {
        return Err(SensorError::Range { kind: VariableKind::Humidity, value: humidity });
    }
    let raw_temp = u16::from_be_bytes([b[4] & 0x7F, b[5]]);
    let mut temperature = f64::from(raw_temp) / 10.0;
    if b[4] & 0x80 != 0 {
        temperature = -temperature;
    }
    Ok((humidity, temperature))
}

/// Builds a valid combined-read frame for the given readings; the inverse of
/// [`decode_am2315`] up to 0.1-unit quantization.
pub fn encode_am2315(humidity: f64, temperature: f64) -> Am2315Frame {
    let raw_humidity = (humidity.clamp(0.0, 100.0) * 10.0).round() as u16;
    let raw_temp = (temperature.abs().min(3276.7) * 10.0).round() as u16;
    let mut b = [0u8; FRAME_LEN];
    b[0] = FUNCTION_READ;
    b[1] = DATA_BYTES;
    b[2..4].copy_from_slice(&raw_humidity.to_be_bytes());
    b[4..6].copy_from_slice(&raw_temp.to_be_bytes());
    if temperature < 0.0 {
        b[4] |= 0x80;
    }
    let crc = crc16(&b[..6]);
    b[6] = (crc & 0xFF) as u8;
    b[7] = (crc >> 8) as u8;
    Am2315Frame(b)
}
