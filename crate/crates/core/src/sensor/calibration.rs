//! Calibration constants for the analog sensor chain, loadable from JSON.
//!
//! The defaults match the deployed hardware: the pyranometer's 1.67 mV per
//! W/m2 scale, the tipping bucket's 0.2794 mm (0.011 in) per tip, the
//! anemometer's 2.4 km/h per closure-per-second, and the vane's 16-entry
//! resistance table read through a 10 kOhm pullup divider.

use super::SensorError;
use crate::DEFAULT_VREF;
use serde::{Deserialize, Serialize};

/// One wind-vane position: resistance selected by the magnet, heading it encodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaneEntry {
    pub ohms: f64,
    pub degrees: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTable {
    /// Pyranometer output scale, volts per W/m2.
    pub irradiance_scale: f64,
    /// Rain per bucket tip, mm.
    pub rain_mm_per_tip: f64,
    /// Wind speed per closure-per-second, km/h.
    pub speed_kmh_per_hz: f64,
    /// Vane resistance table, one entry per supported heading.
    pub vane_entries: Vec<VaneEntry>,
    /// Divider pullup between vref and the vane, ohms.
    pub vane_pullup: f64,
    /// Maximum divider-voltage distance accepted as a table hit, volts.
    pub vane_tolerance: f64,
}

pub const DEFAULT_IRRADIANCE_SCALE: f64 = 0.00167;
pub const DEFAULT_RAIN_MM_PER_TIP: f64 = 0.2794;
pub const DEFAULT_SPEED_KMH_PER_HZ: f64 = 2.4;
pub const DEFAULT_VANE_PULLUP: f64 = 10_000.0;
/// Half the minimum divider-voltage gap of the default table (0.0300 V at
/// 3.3 V / 10 kOhm) is 0.0150 V; 0.012 V keeps a margin under it.
pub const DEFAULT_VANE_TOLERANCE: f64 = 0.012;

/// The 16-position table from the vane's assembly sheet, ohms and degrees.
pub const DEFAULT_VANE_ENTRIES: [(f64, f64); 16] = [
    (33_000.0, 0.0),
    (6_570.0, 22.5),
    (8_200.0, 45.0),
    (891.0, 67.5),
    (1_000.0, 90.0),
    (688.0, 112.5),
    (2_200.0, 135.0),
    (1_410.0, 157.5),
    (3_900.0, 180.0),
    (3_140.0, 202.5),
    (16_000.0, 225.0),
    (14_120.0, 247.5),
    (120_000.0, 270.0),
    (42_120.0, 292.5),
    (64_900.0, 315.0),
    (21_880.0, 337.5),
];

impl Default for CalibrationTable {
    fn default() -> Self {
        CalibrationTable {
            irradiance_scale: DEFAULT_IRRADIANCE_SCALE,
            rain_mm_per_tip: DEFAULT_RAIN_MM_PER_TIP,
            speed_kmh_per_hz: DEFAULT_SPEED_KMH_PER_HZ,
            vane_entries: DEFAULT_VANE_ENTRIES
                .iter()
                .map(|&(ohms, degrees)| VaneEntry { ohms, degrees })
                .collect(),
            vane_pullup: DEFAULT_VANE_PULLUP,
            vane_tolerance: DEFAULT_VANE_TOLERANCE,
        }
    }
}

/// JSON form: every key optional, absent keys take the defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    pub irradiance_scale_v_per_wm2: Option<f64>,
    pub rain_mm_per_tip: Option<f64>,
    pub speed_kmh_per_hz: Option<f64>,
    pub vane_pullup_ohms: Option<f64>,
    pub vane_tolerance_v: Option<f64>,
    pub vane_entries: Option<Vec<VaneEntry>>,
}

impl CalibrationTable {
    /// Divider voltage a given vane resistance produces at `vref`.
    pub fn divider_voltage(&self, ohms: f64, vref: f64) -> f64 {
        vref * ohms / (ohms + self.vane_pullup)
    }

    /// Applies defaults to a parsed config and validates the result.
    pub fn from_config(cfg: CalibrationConfig) -> Result<CalibrationTable, SensorError> {
        let d = CalibrationTable::default();
        let table = CalibrationTable {
            irradiance_scale: cfg.irradiance_scale_v_per_wm2.unwrap_or(d.irradiance_scale),
            rain_mm_per_tip: cfg.rain_mm_per_tip.unwrap_or(d.rain_mm_per_tip),
            speed_kmh_per_hz: cfg.speed_kmh_per_hz.unwrap_or(d.speed_kmh_per_hz),
            vane_pullup: cfg.vane_pullup_ohms.unwrap_or(d.vane_pullup),
            vane_tolerance: cfg.vane_tolerance_v.unwrap_or(d.vane_tolerance),
            vane_entries: cfg.vane_entries.unwrap_or(d.vane_entries),
        };
        table.validate()?;
        Ok(table)
    }

    /// Parses the JSON configuration format.
    pub fn from_json(text: &str) -> Result<CalibrationTable, SensorError> {
        let cfg: CalibrationConfig = serde_json::from_str(text)
            .map_err(|e| SensorError::InvalidCalibration(e.to_string()))?;
        CalibrationTable::from_config(cfg)
    }

    pub fn validate(&self) -> Result<(), SensorError> {
        let bad = |msg: String| Err(SensorError::InvalidCalibration(msg));
        if !(self.irradiance_scale > 0.0) {
            return bad(format!("irradiance_scale_v_per_wm2 must be > 0, got {}", self.irradiance_scale));
        }
        if !(self.rain_mm_per_tip > 0.0) {
            return bad(format!("rain_mm_per_tip must be > 0, got {}", self.rain_mm_per_tip));
        }
        if !(self.speed_kmh_per_hz > 0.0) {
            return bad(format!("speed_kmh_per_hz must be > 0, got {}", self.speed_kmh_per_hz));
        }
        if !(self.vane_pullup > 0.0) {
            return bad(format!("vane_pullup_ohms must be > 0, got {}", self.vane_pullup));
        }
        if !(self.vane_tolerance > 0.0) {
            return bad(format!("vane_tolerance_v must be > 0, got {}", self.vane_tolerance));
        }
        if self.vane_entries.is_empty() {
            return bad("vane_entries must not be empty".into());
        }
        for (i, e) in self.vane_entries.iter().enumerate() {
            if !(e.ohms > 0.0) {
                return bad(format!("vane_entries[{i}].ohms must be > 0, got {}", e.ohms));
            }
            if !(0.0..360.0).contains(&e.degrees) {
                return bad(format!("vane_entries[{i}].degrees must be in [0, 360), got {}", e.degrees));
            }
            for other in &self.vane_entries[..i] {
                if other.degrees == e.degrees {
                    return bad(format!("vane_entries[{i}]: duplicate direction {} deg", e.degrees));
                }
            }
        }
        // Divider voltages must be separated by more than twice the match
        // tolerance at the standard supply, or nearest-entry lookup is
        // ambiguous.
        let mut volts: Vec<f64> = self
            .vane_entries
            .iter()
            .map(|e| self.divider_voltage(e.ohms, DEFAULT_VREF))
            .collect();
        volts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for pair in volts.windows(2) {
            let gap = pair[1] - pair[0];
            if gap <= 2.0 * self.vane_tolerance {
                return bad(format!(
                    "vane divider voltages {:.4} V and {:.4} V are separated by {:.4} V, \
                     not more than twice the tolerance {} V",
                    pair[0], pair[1], gap, self.vane_tolerance
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_table_is_valid() {
        CalibrationTable::default().validate().unwrap();
    }

    #[test]
    fn empty_json_gives_defaults() {
        let table = CalibrationTable::from_json("{}").unwrap();
        assert_eq!(table, CalibrationTable::default());
        assert_eq!(table.vane_entries.len(), 16);
    }

    #[test]
    fn partial_json_overrides() {
        let table = CalibrationTable::from_json(r#"{"rain_mm_per_tip": 0.5}"#).unwrap();
        assert_eq!(table.rain_mm_per_tip, 0.5);
        assert_eq!(table.irradiance_scale, DEFAULT_IRRADIANCE_SCALE);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(CalibrationTable::from_json(r#"{"rain_inches_per_tip": 0.011}"#).is_err());
    }

    #[test]
    fn ambiguous_tolerance_rejected() {
        let cfg = CalibrationConfig { vane_tolerance_v: Some(0.05), ..Default::default() };
        let err = CalibrationTable::from_config(cfg).unwrap_err();
        assert!(matches!(err, SensorError::InvalidCalibration(_)));
    }

    #[test]
    fn duplicate_directions_rejected() {
        let cfg = CalibrationConfig {
            vane_entries: Some(vec![
                VaneEntry { ohms: 1000.0, degrees: 0.0 },
                VaneEntry { ohms: 33000.0, degrees: 0.0 },
            ]),
            ..Default::default()
        };
        assert!(CalibrationTable::from_config(cfg).is_err());
    }

    #[test]
    fn negative_scale_rejected() {
        let cfg = CalibrationConfig { irradiance_scale_v_per_wm2: Some(-1.0), ..Default::default() };
        assert!(CalibrationTable::from_config(cfg).is_err());
    }
}
