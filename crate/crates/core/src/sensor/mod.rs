//! Sensor quantification: pure, deterministic conversion of raw sensor
//! signals into calibrated physical readings for the six monitored variables.
//!
//! Raw signal shapes match the station hardware: the combined-read I2C frame
//! of the AM2315 (humidity + temperature), 10-bit ADC counts for the
//! pyranometer, switch-closure counts for the tipping bucket and anemometer,
//! and a divider voltage for the wind vane.

mod am2315;
mod calibration;
mod convert;
mod crc;

pub use am2315::{decode_am2315, encode_am2315, Am2315Frame};
pub use calibration::{CalibrationConfig, CalibrationTable, VaneEntry};
pub use convert::{
    adc_to_volts, pulses_to_wind_speed, tips_to_rain, vane_to_direction, volts_to_irradiance,
    AdcSample,
};
pub use crc::crc16;

use crate::Millis;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The six monitored meteorological variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableKind {
    Temperature,
    Humidity,
    SolarRadiation,
    Precipitation,
    WindSpeed,
    WindDirection,
}

impl VariableKind {
    /// Every variable, in canonical order.
    pub const ALL: [VariableKind; 6] = [
        VariableKind::Temperature,
        VariableKind::Humidity,
        VariableKind::SolarRadiation,
        VariableKind::Precipitation,
        VariableKind::WindSpeed,
        VariableKind::WindDirection,
    ];

    /// Wire name, also the final topic level.
    pub fn name(self) -> &'static str {
        match self {
            VariableKind::Temperature => "temperature",
            VariableKind::Humidity => "humidity",
            VariableKind::SolarRadiation => "solar_radiation",
            VariableKind::Precipitation => "precipitation",
            VariableKind::WindSpeed => "wind_speed",
            VariableKind::WindDirection => "wind_direction",
        }
    }

    /// Canonical unit string for this variable.
    pub fn unit(self) -> &'static str {
        match self {
            VariableKind::Temperature => "C",
            VariableKind::Humidity => "%",
            VariableKind::SolarRadiation => "W/m2",
            VariableKind::Precipitation => "mm",
            VariableKind::WindSpeed => "km/h",
            VariableKind::WindDirection => "deg",
        }
    }

    /// Inverse of [`VariableKind::name`].
    pub fn from_name(name: &str) -> Option<VariableKind> {
        VariableKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl std::fmt::Display for VariableKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One quantified measurement in the canonical unit of its kind.
#[derive(Debug, Clone, PartialEq)]
pub struct Reading {
    pub kind: VariableKind,
    pub value: f64,
    pub captured_at: Millis,
}

impl Reading {
    /// Builds a reading, enforcing the per-kind value range.
    pub fn new(kind: VariableKind, value: f64, captured_at: Millis) -> Result<Reading, SensorError> {
        if !in_range(kind, value) {
            return Err(SensorError::Range { kind, value });
        }
        Ok(Reading { kind, value, captured_at })
    }
}

/// Range check shared by [`Reading::new`] and gateway-side validation.
pub fn in_range(kind: VariableKind, value: f64) -> bool {
    if !value.is_finite() {
        return false;
    }
    match kind {
        VariableKind::Temperature => true,
        VariableKind::Humidity => (0.0..=100.0).contains(&value),
        VariableKind::WindDirection => (0.0..360.0).contains(&value),
        VariableKind::SolarRadiation | VariableKind::Precipitation | VariableKind::WindSpeed => {
            value >= 0.0
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensorError {
    #[error("frame CRC mismatch: computed {computed:#06x}, frame carries {stored:#06x}")]
    CrcMismatch { computed: u16, stored: u16 },
    #[error("bad frame header: function code {function:#04x}, byte count {count}")]
    BadHeader { function: u8, count: u8 },
    #[error("{kind} value {value} outside its valid range")]
    Range { kind: VariableKind, value: f64 },
    #[error("input voltage {volts} V above the sensor span limit {limit} V")]
    OutOfRange { volts: f64, limit: f64 },
    #[error("measurement window must be positive, got {0} s")]
    ZeroWindow(f64),
    #[error("no vane table entry within {tolerance} V of {volts} V")]
    NoMatch { volts: f64, tolerance: f64 },
    #[error("invalid calibration: {0}")]
    InvalidCalibration(String),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_totality() {
        let units: Vec<&str> = VariableKind::ALL.iter().map(|k| k.unit()).collect();
        assert_eq!(units, ["C", "%", "W/m2", "mm", "km/h", "deg"]);
        for kind in VariableKind::ALL {
            assert_eq!(VariableKind::from_name(kind.name()), Some(kind));
        }
        assert_eq!(VariableKind::from_name("pressure"), None);
    }

    #[test]
    fn reading_ranges() {
        assert!(Reading::new(VariableKind::Humidity, 100.0, 0).is_ok());
        assert!(Reading::new(VariableKind::Humidity, 100.1, 0).is_err());
        assert!(Reading::new(VariableKind::Humidity, -0.1, 0).is_err());
        assert!(Reading::new(VariableKind::WindDirection, 360.0, 0).is_err());
        assert!(Reading::new(VariableKind::WindDirection, 0.0, 0).is_ok());
        assert!(Reading::new(VariableKind::Temperature, -40.0, 0).is_ok());
        assert!(Reading::new(VariableKind::Precipitation, -0.01, 0).is_err());
        assert!(Reading::new(VariableKind::SolarRadiation, f64::NAN, 0).is_err());
    }
}
