//! Minimal MQTT 3.1.1: octet-exact control-packet codec, topic matching, and
//! pure broker/client session state machines.
//!
//! Subset: CONNECT/CONNACK, PUBLISH qos 0-1, PUBACK, SUBSCRIBE/SUBACK,
//! PINGREQ/PINGRESP, DISCONNECT. No qos 2, retained delivery, wills or
//! persistent sessions. The state machines are pure transition functions so
//! every run can be replayed deterministically; hosting I/O (simulated links
//! or real TCP streams) lives outside them.

mod broker;
mod client;
pub mod net;
mod packet;
mod topic;

pub use broker::{broker_step, BrokerAction, BrokerEvent, BrokerState, ConnId};
pub use client::{client_step, ClientAction, ClientError, ClientEvent, Session, SessionConfig};
pub use packet::{
    decode_packet, decode_remaining_length, encode_packet, encode_remaining_length, DecodeError,
    EncodeError, MqttPacket, QoS, MAX_REMAINING_LENGTH,
};
pub use topic::{topic_matches, valid_filter, valid_topic};

/// Retransmission interval for unacknowledged qos-1 traffic, milliseconds.
pub const RETRY_TIMEOUT_MS: crate::Millis = 5_000;
/// Attempts after the first send before the session signals an error.
pub const MAX_RETRIES: u32 = 5;
