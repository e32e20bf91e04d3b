//! Pure broker state machine: session tracking, subscription routing,
//! qos-1 bookkeeping and keep-alive enforcement.
//!
//! The host owns the transport. It reports connections, decoded packets and
//! clock ticks; every transition returns the packets to send and the
//! connections to close, so identical event sequences replay identically.

use super::packet::{MqttPacket, QoS};
use super::topic::topic_matches;
use super::{MAX_RETRIES, RETRY_TIMEOUT_MS};
use crate::Millis;
use std::collections::{BTreeMap, BTreeSet};

/// Transport-level connection identity, assigned by the host.
pub type ConnId = String;

#[derive(Debug, Clone, PartialEq)]
pub enum BrokerEvent {
    /// A transport connection opened; a CONNECT must arrive before anything else.
    Connected { conn: ConnId },
    /// The transport saw the connection drop.
    ConnectionClosed { conn: ConnId },
    PacketIn { conn: ConnId, packet: MqttPacket },
    Tick,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BrokerAction {
    Send { conn: ConnId, packet: MqttPacket },
    Close { conn: ConnId },
}

#[derive(Debug, Clone)]
struct OutboundPublish {
    topic: String,
    payload: Vec<u8>,
    sent_at: Millis,
    retries: u32,
}

#[derive(Debug, Clone)]
struct BrokerSession {
    client_id: String,
    keep_alive_s: u16,
    subscriptions: Vec<(String, QoS)>,
    next_packet_id: u16,
    /// qos-1 deliveries to this subscriber awaiting its PUBACK.
    inflight: BTreeMap<u16, OutboundPublish>,
    last_activity: Millis,
}

/// All broker state; one value per listening endpoint.
#[derive(Debug, Clone, Default)]
pub struct BrokerState {
    /// Connections seen at the transport but not yet CONNECTed.
    pending: BTreeSet<ConnId>,
    sessions: BTreeMap<ConnId, BrokerSession>,
}

impl BrokerState {
    pub fn new() -> BrokerState {
        BrokerState::default()
    }

    pub fn session_count(&self) -> usize {
        self.sessions.len()
    }

    pub fn has_session(&self, conn: &str) -> bool {
        self.sessions.contains_key(conn)
    }

    /// qos-1 deliveries still awaiting acknowledgment, across all sessions.
    pub fn inflight_total(&self) -> usize {
        self.sessions.values().map(|s| s.inflight.len()).sum()
    }
}

pub(crate) fn alloc_packet_id<V>(next: &mut u16, in_use: &BTreeMap<u16, V>) -> u16 {
    loop {
        let id = *next;
        *next = if *next == u16::MAX { 1 } else { *next + 1 };
        if !in_use.contains_key(&id) {
            return id;
        }
    }
}

/// Applies one event, returning the transport actions it produces.
pub fn broker_step(state: &mut BrokerState, now: Millis, event: BrokerEvent) -> Vec<BrokerAction> {
    let mut actions = Vec::new();
    match event {
        BrokerEvent::Connected { conn } => {
            if !state.sessions.contains_key(&conn) {
                state.pending.insert(conn);
            }
        }
        BrokerEvent::ConnectionClosed { conn } => {
            state.pending.remove(&conn);
            state.sessions.remove(&conn);
        }
        BrokerEvent::Tick => {
            tick(state, now, &mut actions);
        }
        BrokerEvent::PacketIn { conn, packet } => {
            if let Some(session) = state.sessions.get_mut(&conn) {
                session.last_activity = now;
            }
            handle_packet(state, now, conn, packet, &mut actions);
        }
    }
    actions
}

fn close(state: &mut BrokerState, conn: &str, actions: &mut Vec<BrokerAction>) {
    state.pending.remove(conn);
    state.sessions.remove(conn);
    actions.push(BrokerAction::Close { conn: conn.to_string() });
}

fn handle_packet(
    state: &mut BrokerState,
    now: Millis,
    conn: ConnId,
    packet: MqttPacket,
    actions: &mut Vec<BrokerAction>,
) {
    match packet {
        MqttPacket::Connect { client_id, keep_alive_s, clean_session } => {
            if !clean_session {
                // Persistent sessions are outside the subset.
                close(state, &conn, actions);
                return;
            }
            if let Some(existing) = state.sessions.get(&conn) {
                if existing.client_id == client_id {
                    // Duplicate CONNECT after a lost CONNACK: acknowledge again.
                    actions.push(BrokerAction::Send {
                        conn,
                        packet: MqttPacket::ConnAck { return_code: 0 },
                    });
                } else {
                    close(state, &conn, actions);
                }
                return;
            }
            if !state.pending.remove(&conn) {
                close(state, &conn, actions);
                return;
            }
            // A second connection with the same client id takes the session over.
            let stale: Option<ConnId> = state
                .sessions
                .iter()
                .find(|(_, s)| s.client_id == client_id)
                .map(|(c, _)| c.clone());
            if let Some(stale_conn) = stale {
                close(state, &stale_conn, actions);
            }
            state.sessions.insert(
                conn.clone(),
                BrokerSession {
                    client_id,
                    keep_alive_s,
                    subscriptions: Vec::new(),
                    next_packet_id: 1,
                    inflight: BTreeMap::new(),
                    last_activity: now,
                },
            );
            actions.push(BrokerAction::Send { conn, packet: MqttPacket::ConnAck { return_code: 0 } });
        }
        MqttPacket::Subscribe { packet_id, filters } => {
            if !state.sessions.contains_key(&conn) {
                close(state, &conn, actions);
                return;
            }
            let mut granted = Vec::with_capacity(filters.len());
            let session = state.sessions.get_mut(&conn).unwrap();
            for (filter, requested) in filters {
                let grant = QoS::from_bits(requested.bits().min(1)).unwrap();
                match session.subscriptions.iter_mut().find(|(f, _)| *f == filter) {
                    Some(slot) => slot.1 = grant,
                    None => session.subscriptions.push((filter, grant)),
                }
                granted.push(grant.bits());
            }
            actions.push(BrokerAction::Send {
                conn,
                packet: MqttPacket::SubAck { packet_id, granted },
            });
        }
        MqttPacket::Publish { topic, payload, qos, packet_id, .. } => {
            if !state.sessions.contains_key(&conn) {
                close(state, &conn, actions);
                return;
            }
            route_publish(state, now, &topic, &payload, qos, actions);
            if qos == QoS::AtLeastOnce {
                let id = packet_id.expect("decoder guarantees packet id at qos 1");
                actions.push(BrokerAction::Send { conn, packet: MqttPacket::PubAck { packet_id: id } });
            }
        }
        MqttPacket::PubAck { packet_id } => {
            if let Some(session) = state.sessions.get_mut(&conn) {
                session.inflight.remove(&packet_id);
            } else {
                close(state, &conn, actions);
            }
        }
        MqttPacket::PingReq => {
            if state.sessions.contains_key(&conn) {
                actions.push(BrokerAction::Send { conn, packet: MqttPacket::PingResp });
            } else {
                close(state, &conn, actions);
            }
        }
        MqttPacket::Disconnect => {
            close(state, &conn, actions);
        }
        // Packets only a broker sends have no business arriving here.
        MqttPacket::ConnAck { .. } | MqttPacket::SubAck { .. } | MqttPacket::PingResp => {
            close(state, &conn, actions);
        }
    }
}

/// Forwards a publish to every session with a matching filter, once per
/// session at the strongest matching grade: min(publish qos, subscription qos),
/// maximised over that session's matching filters.
fn route_publish(
    state: &mut BrokerState,
    now: Millis,
    topic: &str,
    payload: &[u8],
    publish_qos: QoS,
    actions: &mut Vec<BrokerAction>,
) {
    for (conn, session) in state.sessions.iter_mut() {
        let mut best: Option<QoS> = None;
        for (filter, sub_qos) in &session.subscriptions {
            if topic_matches(filter, topic) {
                let effective = publish_qos.min(*sub_qos);
                best = Some(best.map_or(effective, |b| b.max(effective)));
            }
        }
        let Some(effective) = best else { continue };
        let packet = match effective {
            QoS::AtMostOnce => MqttPacket::Publish {
                topic: topic.to_string(),
                payload: payload.to_vec(),
                qos: QoS::AtMostOnce,
                packet_id: None,
                dup: false,
                retain: false,
            },
            QoS::AtLeastOnce => {
                let id = alloc_packet_id(&mut session.next_packet_id, &session.inflight);
                session.inflight.insert(
                    id,
                    OutboundPublish {
                        topic: topic.to_string(),
                        payload: payload.to_vec(),
                        sent_at: now,
                        retries: 0,
                    },
                );
                MqttPacket::Publish {
                    topic: topic.to_string(),
                    payload: payload.to_vec(),
                    qos: QoS::AtLeastOnce,
                    packet_id: Some(id),
                    dup: false,
                    retain: false,
                }
            }
        };
        actions.push(BrokerAction::Send { conn: conn.clone(), packet });
    }
}

fn tick(state: &mut BrokerState, now: Millis, actions: &mut Vec<BrokerAction>) {
    // Keep-alive: close sessions silent for longer than 1.5x their interval.
    let expired: Vec<ConnId> = state
        .sessions
        .iter()
        .filter(|(_, s)| {
            s.keep_alive_s > 0 && now - s.last_activity > Millis::from(s.keep_alive_s) * 1500
        })
        .map(|(c, _)| c.clone())
        .collect();
    for conn in expired {
        close(state, &conn, actions);
    }
    // Retransmit unacknowledged qos-1 deliveries; give up after the retry cap.
    for (conn, session) in state.sessions.iter_mut() {
        let mut abandoned = Vec::new();
        for (&id, publish) in session.inflight.iter_mut() {
            if now - publish.sent_at < RETRY_TIMEOUT_MS {
                continue;
            }
            if publish.retries >= MAX_RETRIES {
                abandoned.push(id);
                continue;
            }
            publish.retries += 1;
            publish.sent_at = now;
            actions.push(BrokerAction::Send {
                conn: conn.clone(),
                packet: MqttPacket::Publish {
                    topic: publish.topic.clone(),
                    payload: publish.payload.clone(),
                    qos: QoS::AtLeastOnce,
                    packet_id: Some(id),
                    dup: true,
                    retain: false,
                },
            });
        }
        for id in abandoned {
            session.inflight.remove(&id);
        }
    }
}
