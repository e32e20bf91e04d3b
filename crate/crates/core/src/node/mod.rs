//! The station agent: initialize, measure, quantify, publish.
//!
//! Each node samples its configured sensors on a fixed interval, converts the
//! raw signals through the sensor codec, wraps every reading in a
//! [`DataPacket`] stamped with the sample time, and publishes it to
//! `station/<node_id>/<name>` over the node's single assigned protocol.

mod agent;
mod packet;
mod source;

pub use agent::NodeRuntime;
pub use packet::{format_value, parse_packet, quantize_value, serialize_packet, DataPacket, ParseError};
pub use source::{RawSignal, ReplaySource, SensorSource, SyntheticSource};

use crate::mqtt::QoS;
use crate::sensor::{
    adc_to_volts, decode_am2315, pulses_to_wind_speed, tips_to_rain, vane_to_direction,
    volts_to_irradiance, AdcSample, CalibrationTable, VariableKind,
};
use crate::sim::Protocol;
use crate::{Millis, DEFAULT_VREF};
use thiserror::Error;

/// Longest node id the canonical payload can carry within a zigbee frame's
/// worth of octets.
pub const MAX_NODE_ID_LEN: usize = 7;
/// Keep-alive advertised by node sessions, seconds.
pub const NODE_KEEP_ALIVE_S: u16 = 60;

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub node_id: String,
    pub protocol: Protocol,
    pub sample_interval_ms: Millis,
    pub sensors: Vec<VariableKind>,
    pub calibration: CalibrationTable,
    pub qos: QoS,
}

impl NodeConfig {
    pub fn new(node_id: &str, protocol: Protocol) -> NodeConfig {
        NodeConfig {
            node_id: node_id.to_string(),
            protocol,
            sample_interval_ms: 12_000,
            sensors: VariableKind::ALL.to_vec(),
            calibration: CalibrationTable::default(),
            qos: QoS::AtLeastOnce,
        }
    }

    pub fn validate(&self) -> Result<(), NodeError> {
        let field = |msg: String| Err(NodeError::InvalidConfig(msg));
        if self.node_id.is_empty() {
            return field("node_id: must not be empty".into());
        }
        if self.node_id.len() > MAX_NODE_ID_LEN {
            return field(format!(
                "node_id: {:?} is longer than {MAX_NODE_ID_LEN} chars, which would overflow the \
                 wire-size budget",
                self.node_id
            ));
        }
        if !self.node_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return field(format!(
                "node_id: {:?} may only contain ASCII letters, digits, '-' and '_'",
                self.node_id
            ));
        }
        if self.sample_interval_ms < 1_000 {
            return field(format!(
                "sample_interval_ms: must be at least 1000, got {}",
                self.sample_interval_ms
            ));
        }
        if self.sensors.is_empty() {
            return field("sensors: must not be empty".into());
        }
        for (i, kind) in self.sensors.iter().enumerate() {
            if self.sensors[..i].contains(kind) {
                return field(format!("sensors: duplicate entry {kind}"));
            }
        }
        self.calibration
            .validate()
            .map_err(|e| NodeError::InvalidConfig(format!("calibration: {e}")))?;
        Ok(())
    }
}

/// Counters a node run reports.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct NodeReport {
    pub samples: u64,
    pub published: u64,
    pub faults: u64,
    pub retransmissions: u64,
    pub errors: u64,
}

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("invalid node config: {0}")]
    InvalidConfig(String),
    #[error("link down: {0}")]
    LinkDown(String),
}

/// Carry-over between samples: rain tips are reported as deltas.
#[derive(Debug, Clone, Copy, Default)]
pub struct SampleState {
    prev_t: Option<Millis>,
    prev_rain_tips: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub packets: Vec<DataPacket>,
    pub faults: u32,
}

/// Reads every configured sensor at time `t` and quantifies the results.
///
/// The AM2315 serves humidity and temperature from one combined read, so a
/// corrupt frame costs both variables one fault. A faulty variable is skipped;
/// the rest still produce packets. Rain is the tip delta since the previous
/// sample; wind speed averages pulses over the elapsed window.
pub fn sample_once(
    cfg: &NodeConfig,
    source: &dyn SensorSource,
    state: &mut SampleState,
    t: Millis,
) -> SampleOutcome {
    let mut packets = Vec::new();
    let mut faults = 0u32;
    let window_ms = match state.prev_t {
        Some(prev) => t - prev,
        None => cfg.sample_interval_ms,
    };

    let mut push = |kind: VariableKind, value: f64| {
        packets.push(DataPacket {
            name: kind.name().to_string(),
            units: kind.unit().to_string(),
            value,
            captured_at: t,
            protocol: cfg.protocol,
            node_id: cfg.node_id.clone(),
        });
    };

    let wants = |kind: VariableKind| cfg.sensors.contains(&kind);

    if wants(VariableKind::Temperature) || wants(VariableKind::Humidity) {
        let probe_kind = if wants(VariableKind::Temperature) {
            VariableKind::Temperature
        } else {
            VariableKind::Humidity
        };
        match source.raw(probe_kind, t) {
            RawSignal::Frame(frame) => match decode_am2315(&frame) {
                Ok((humidity, temperature)) => {
                    if wants(VariableKind::Temperature) {
                        push(VariableKind::Temperature, temperature);
                    }
                    if wants(VariableKind::Humidity) {
                        push(VariableKind::Humidity, humidity);
                    }
                }
                Err(_) => faults += 1,
            },
            _ => faults += 1,
        }
    }

    if wants(VariableKind::SolarRadiation) {
        let volts = match source.raw(VariableKind::SolarRadiation, t) {
            RawSignal::AdcCounts(counts) => {
                AdcSample::new(counts, DEFAULT_VREF).map(adc_to_volts).ok()
            }
            RawSignal::Volts(v) => Some(v),
            _ => None,
        };
        match volts.map(|v| volts_to_irradiance(v, &cfg.calibration)) {
            Some(Ok(wm2)) => push(VariableKind::SolarRadiation, wm2),
            _ => faults += 1,
        }
    }

    if wants(VariableKind::Precipitation) {
        match source.raw(VariableKind::Precipitation, t) {
            RawSignal::PulseCount(total) => {
                let baseline = state.prev_rain_tips.unwrap_or_else(|| {
                    match source.raw(VariableKind::Precipitation, t - window_ms) {
                        RawSignal::PulseCount(n) => n,
                        _ => 0,
                    }
                });
                let delta = total.saturating_sub(baseline);
                state.prev_rain_tips = Some(total);
                push(VariableKind::Precipitation, tips_to_rain(delta, &cfg.calibration));
            }
            _ => faults += 1,
        }
    }

    if wants(VariableKind::WindSpeed) {
        let now_total = source.raw(VariableKind::WindSpeed, t);
        let prev_total = source.raw(VariableKind::WindSpeed, t - window_ms);
        match (now_total, prev_total) {
            (RawSignal::PulseCount(now), RawSignal::PulseCount(prev)) => {
                let delta = now.saturating_sub(prev);
                match pulses_to_wind_speed(delta, window_ms as f64 / 1000.0, &cfg.calibration) {
                    Ok(kmh) => push(VariableKind::WindSpeed, kmh),
                    Err(_) => faults += 1,
                }
            }
            _ => faults += 1,
        }
    }

    if wants(VariableKind::WindDirection) {
        match source.raw(VariableKind::WindDirection, t) {
            RawSignal::Volts(v) => match vane_to_direction(v, DEFAULT_VREF, &cfg.calibration) {
                Ok(degrees) => push(VariableKind::WindDirection, degrees),
                Err(_) => faults += 1,
            },
            _ => faults += 1,
        }
    }

    state.prev_t = Some(t);
    SampleOutcome { packets, faults }
}
