//! Analog and pulse conversions: ADC counts to volts, volts to irradiance,
//! bucket tips to rain, anemometer pulses to wind speed, divider voltage to
//! wind direction.

use super::calibration::CalibrationTable;
use super::SensorError;

/// Nominal analog span of the pyranometer output, volts.
pub const IRRADIANCE_SPAN_V: f64 = 3.0;
/// Slack above the span absorbed as ADC noise before flagging a fault.
pub const IRRADIANCE_SPAN_SLACK: f64 = 0.05;

/// One 10-bit ADC conversion together with its reference voltage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdcSample {
    counts: u16,
    vref: f64,
}

impl AdcSample {
    /// `counts` must fit 10 bits; `vref` must be positive.
    pub fn new(counts: u16, vref: f64) -> Result<AdcSample, SensorError> {
        if counts > 1023 {
            return Err(SensorError::InvalidCalibration(format!(
                "ADC counts {counts} exceed the 10-bit range"
            )));
        }
        if !(vref > 0.0) {
            return Err(SensorError::InvalidCalibration(format!("vref must be > 0, got {vref}")));
        }
        Ok(AdcSample { counts, vref })
    }

    pub fn counts(&self) -> u16 {
        self.counts
    }

    pub fn vref(&self) -> f64 {
        self.vref
    }
}

/// counts * vref / 1023, so full scale maps exactly to vref.
pub fn adc_to_volts(sample: AdcSample) -> f64 {
    f64::from(sample.counts) * sample.vref / 1023.0
}

/// Volts to W/m2 through the pyranometer scale. Inputs above the sensor span
/// (plus 5% slack) signal a mis-wired input rather than clamping.
pub fn volts_to_irradiance(v: f64, cal: &CalibrationTable) -> Result<f64, SensorError> {
    let limit = IRRADIANCE_SPAN_V * (1.0 + IRRADIANCE_SPAN_SLACK);
    if !v.is_finite() || v < 0.0 || v > limit {
        return Err(SensorError::OutOfRange { volts: v, limit });
    }
    Ok(v / cal.irradiance_scale)
}

/// Bucket tips to millimetres of rain.
pub fn tips_to_rain(tips: u64, cal: &CalibrationTable) -> f64 {
    tips as f64 * cal.rain_mm_per_tip
}

/// Closure count over a window to km/h.
pub fn pulses_to_wind_speed(pulses: u64, window_s: f64, cal: &CalibrationTable) -> Result<f64, SensorError> {
    if !(window_s > 0.0) {
        return Err(SensorError::ZeroWindow(window_s));
    }
    Ok(pulses as f64 / window_s * cal.speed_kmh_per_hz)
}

/// Nearest-divider-voltage lookup in the vane table; a gap wider than the
/// tolerance means an open circuit or broken wiring.
pub fn vane_to_direction(v: f64, vref: f64, cal: &CalibrationTable) -> Result<f64, SensorError> {
    let mut best: Option<(f64, f64)> = None; // (distance, degrees)
    for entry in &cal.vane_entries {
        let dv = cal.divider_voltage(entry.ohms, vref);
        let dist = (dv - v).abs();
        if best.map_or(true, |(d, _)| dist < d) {
            best = Some((dist, entry.degrees));
        }
    }
    match best {
        Some((dist, degrees)) if dist <= cal.vane_tolerance => Ok(degrees),
        _ => Err(SensorError::NoMatch { volts: v, tolerance: cal.vane_tolerance }),
    }
}
