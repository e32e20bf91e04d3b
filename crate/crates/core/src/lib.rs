//! Desk-scale environmental monitoring network, fully simulated.
//!
//! The stack mirrors a field deployment: sensing nodes quantify six
//! meteorological variables, publish five-field data packets over exactly one
//! wireless protocol each (wifi, bluetooth or zigbee), and a central gateway
//! subscribes on all protocols simultaneously, validates, deduplicates and
//! persists every packet for later inter-node comparison.
//!
//! Layers, bottom up:
//!
//! * [`sensor`] — pure conversion of raw signals (I2C frames, ADC counts,
//!   pulse counts, divider voltages) into calibrated readings.
//! * [`mqtt`] — minimal MQTT 3.1.1: octet-exact packet codec, topic matching,
//!   and pure broker/client state machines (qos 0 and 1).
//! * [`sim`] — deterministic star-topology link simulation with seeded
//!   per-protocol latency, jitter and loss.
//! * [`node`] — the station agent: sample, quantify, wrap, publish.
//! * [`gateway`] — ingest, validate, deduplicate, store, forward upstream.
//! * [`store`] — append-only JSON-lines time series plus alignment analysis.
//! * [`scenario`] — seeded end-to-end runs binding all of the above.
//!
//! Everything in the simulation path is a pure state transition over an
//! integer-millisecond clock: the same seed and scenario produce
//! byte-identical stores, delivery logs and stats.

pub mod gateway;
pub mod mqtt;
pub mod node;
pub mod scenario;
pub mod sensor;
pub mod sim;
pub mod store;

/// Milliseconds on the scenario clock (simulation) or UTC epoch (live mode).
pub type Millis = i64;

/// Supply voltage used by the analog sensor chain unless configured otherwise.
pub const DEFAULT_VREF: f64 = 3.3;
