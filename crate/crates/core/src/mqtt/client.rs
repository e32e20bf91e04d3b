//! Pure client session state machine.
//!
//! The same retry discipline covers everything that awaits a broker
//! response: CONNECT awaiting CONNACK, SUBSCRIBE awaiting SUBACK, and qos-1
//! PUBLISH awaiting PUBACK. Requests made before the session is established
//! queue up and flush on CONNACK, so callers can publish on a fixed schedule
//! without tracking connection state themselves.

use super::broker::alloc_packet_id;
use super::packet::{MqttPacket, QoS};
use super::{MAX_RETRIES, RETRY_TIMEOUT_MS};
use crate::Millis;
use std::collections::{BTreeMap, VecDeque};
use thiserror::Error;

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub client_id: String,
    pub keep_alive_s: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClientEvent {
    /// Open the session: sends CONNECT.
    Start,
    PacketIn(MqttPacket),
    Publish { topic: String, payload: Vec<u8>, qos: QoS },
    Subscribe { filters: Vec<(String, QoS)> },
    Tick,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClientAction {
    Send(MqttPacket),
    /// An inbound publish for the application.
    Deliver { topic: String, payload: Vec<u8> },
    /// The broker accepted the connection.
    Connected,
    Error(ClientError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClientError {
    #[error("broker refused the connection with return code {0}")]
    ConnectRefused(u8),
    #[error("no CONNACK after {0} attempts")]
    ConnectTimeout(u32),
    #[error("subscription {packet_id} not acknowledged after {attempts} attempts")]
    SubscribeTimeout { packet_id: u16, attempts: u32 },
    #[error("broker rejected a subscription filter")]
    SubscribeRejected,
    #[error("publish {packet_id} not acknowledged after {attempts} attempts")]
    PublishTimeout { packet_id: u16, attempts: u32 },
}

#[derive(Debug, Clone, PartialEq)]
enum Phase {
    Idle,
    ConnectSent { sent_at: Millis, retries: u32 },
    Established,
    Failed,
}

#[derive(Debug, Clone)]
struct InflightPublish {
    topic: String,
    payload: Vec<u8>,
    sent_at: Millis,
    retries: u32,
}

#[derive(Debug, Clone)]
struct PendingSubscribe {
    filters: Vec<(String, QoS)>,
    sent_at: Millis,
    retries: u32,
}

/// Client-side session state; one per broker connection.
#[derive(Debug, Clone)]
pub struct Session {
    cfg: SessionConfig,
    phase: Phase,
    next_packet_id: u16,
    inflight: BTreeMap<u16, InflightPublish>,
    awaiting_suback: BTreeMap<u16, PendingSubscribe>,
    queued_publishes: VecDeque<(String, Vec<u8>, QoS)>,
    queued_subscribes: VecDeque<Vec<(String, QoS)>>,
    last_send: Millis,
}

impl Session {
    pub fn new(cfg: SessionConfig) -> Session {
        Session {
            cfg,
            phase: Phase::Idle,
            next_packet_id: 1,
            inflight: BTreeMap::new(),
            awaiting_suback: BTreeMap::new(),
            queued_publishes: VecDeque::new(),
            queued_subscribes: VecDeque::new(),
            last_send: 0,
        }
    }

    pub fn client_id(&self) -> &str {
        &self.cfg.client_id
    }

    pub fn is_established(&self) -> bool {
        self.phase == Phase::Established
    }

    pub fn is_failed(&self) -> bool {
        self.phase == Phase::Failed
    }

    pub fn inflight_len(&self) -> usize {
        self.inflight.len()
    }

    /// Anything still awaiting a broker response or queued for send.
    pub fn is_busy(&self) -> bool {
        !self.inflight.is_empty()
            || !self.awaiting_suback.is_empty()
            || !self.queued_publishes.is_empty()
            || !self.queued_subscribes.is_empty()
            || matches!(self.phase, Phase::ConnectSent { .. })
    }

    fn connect_packet(&self) -> MqttPacket {
        MqttPacket::Connect {
            client_id: self.cfg.client_id.clone(),
            keep_alive_s: self.cfg.keep_alive_s,
            clean_session: true,
        }
    }

    fn send(&mut self, now: Millis, packet: MqttPacket, actions: &mut Vec<ClientAction>) {
        self.last_send = now;
        actions.push(ClientAction::Send(packet));
    }

    fn start_publish(&mut self, now: Millis, topic: String, payload: Vec<u8>, qos: QoS, actions: &mut Vec<ClientAction>) {
        match qos {
            QoS::AtMostOnce => {
                let packet = MqttPacket::Publish { topic, payload, qos, packet_id: None, dup: false, retain: false };
                self.send(now, packet, actions);
            }
            QoS::AtLeastOnce => {
                let id = self.alloc_id();
                self.inflight.insert(
                    id,
                    InflightPublish { topic: topic.clone(), payload: payload.clone(), sent_at: now, retries: 0 },
                );
                let packet = MqttPacket::Publish { topic, payload, qos, packet_id: Some(id), dup: false, retain: false };
                self.send(now, packet, actions);
            }
        }
    }

    fn start_subscribe(&mut self, now: Millis, filters: Vec<(String, QoS)>, actions: &mut Vec<ClientAction>) {
        let id = self.alloc_id();
        self.awaiting_suback.insert(id, PendingSubscribe { filters: filters.clone(), sent_at: now, retries: 0 });
        self.send(now, MqttPacket::Subscribe { packet_id: id, filters }, actions);
    }

    fn alloc_id(&mut self) -> u16 {
        // One id space shared by publishes and subscribes keeps acks unambiguous.
        loop {
            let id = alloc_packet_id(&mut self.next_packet_id, &self.inflight);
            if !self.awaiting_suback.contains_key(&id) {
                return id;
            }
        }
    }
}

/// Applies one event to the session, returning the actions it produces.
pub fn client_step(session: &mut Session, now: Millis, event: ClientEvent) -> Vec<ClientAction> {
    let mut actions = Vec::new();
    match event {
        ClientEvent::Start => {
            if session.phase == Phase::Idle {
                session.phase = Phase::ConnectSent { sent_at: now, retries: 0 };
                let packet = session.connect_packet();
                session.send(now, packet, &mut actions);
            }
        }
        ClientEvent::Publish { topic, payload, qos } => match session.phase {
            Phase::Established => session.start_publish(now, topic, payload, qos, &mut actions),
            Phase::Failed => {}
            _ => session.queued_publishes.push_back((topic, payload, qos)),
        },
        ClientEvent::Subscribe { filters } => match session.phase {
            Phase::Established => session.start_subscribe(now, filters, &mut actions),
            Phase::Failed => {}
            _ => session.queued_subscribes.push_back(filters),
        },
        ClientEvent::PacketIn(packet) => handle_packet(session, now, packet, &mut actions),
        ClientEvent::Tick => tick(session, now, &mut actions),
    }
    actions
}

fn handle_packet(session: &mut Session, now: Millis, packet: MqttPacket, actions: &mut Vec<ClientAction>) {
    match packet {
        MqttPacket::ConnAck { return_code } => match session.phase {
            Phase::ConnectSent { .. } => {
                if return_code != 0 {
                    session.phase = Phase::Failed;
                    actions.push(ClientAction::Error(ClientError::ConnectRefused(return_code)));
                    return;
                }
                session.phase = Phase::Established;
                actions.push(ClientAction::Connected);
                while let Some(filters) = session.queued_subscribes.pop_front() {
                    session.start_subscribe(now, filters, actions);
                }
                while let Some((topic, payload, qos)) = session.queued_publishes.pop_front() {
                    session.start_publish(now, topic, payload, qos, actions);
                }
            }
            // Duplicate CONNACK after a retried CONNECT: already established.
            _ => {}
        },
        MqttPacket::Publish { topic, payload, qos, packet_id, .. } => {
            actions.push(ClientAction::Deliver { topic, payload });
            if qos == QoS::AtLeastOnce {
                let id = packet_id.expect("decoder guarantees packet id at qos 1");
                session.send(now, MqttPacket::PubAck { packet_id: id }, actions);
            }
        }
        MqttPacket::PubAck { packet_id } => {
            session.inflight.remove(&packet_id);
        }
        MqttPacket::SubAck { packet_id, granted } => {
            if session.awaiting_suback.remove(&packet_id).is_some() && granted.contains(&0x80) {
                actions.push(ClientAction::Error(ClientError::SubscribeRejected));
            }
        }
        MqttPacket::PingResp => {}
        // Broker-bound packets arriving at a client are simply ignored; the
        // hosting transport treats them as that broker's bug, not ours.
        _ => {}
    }
}

fn tick(session: &mut Session, now: Millis, actions: &mut Vec<ClientAction>) {
    match &mut session.phase {
        Phase::ConnectSent { sent_at, retries } => {
            if now - *sent_at >= RETRY_TIMEOUT_MS {
                if *retries >= MAX_RETRIES {
                    let attempts = *retries + 1;
                    session.phase = Phase::Failed;
                    actions.push(ClientAction::Error(ClientError::ConnectTimeout(attempts)));
                } else {
                    *retries += 1;
                    *sent_at = now;
                    let packet = session.connect_packet();
                    session.send(now, packet, actions);
                }
            }
            return;
        }
        Phase::Established => {}
        _ => return,
    }

    // Subscribe retries.
    let mut failed_subs = Vec::new();
    let mut resend_subs = Vec::new();
    for (&id, pending) in session.awaiting_suback.iter_mut() {
        if now - pending.sent_at < RETRY_TIMEOUT_MS {
            continue;
        }
        if pending.retries >= MAX_RETRIES {
            failed_subs.push((id, pending.retries + 1));
        } else {
            pending.retries += 1;
            pending.sent_at = now;
            resend_subs.push(MqttPacket::Subscribe { packet_id: id, filters: pending.filters.clone() });
        }
    }
    for packet in resend_subs {
        session.send(now, packet, actions);
    }
    for (id, attempts) in failed_subs {
        session.awaiting_suback.remove(&id);
        actions.push(ClientAction::Error(ClientError::SubscribeTimeout { packet_id: id, attempts }));
    }

    // qos-1 publish retries, dup flag set, same packet id.
    let mut failed_pubs = Vec::new();
    let mut resend_pubs = Vec::new();
    for (&id, publish) in session.inflight.iter_mut() {
        if now - publish.sent_at < RETRY_TIMEOUT_MS {
            continue;
        }
        if publish.retries >= MAX_RETRIES {
            failed_pubs.push((id, publish.retries + 1));
        } else {
            publish.retries += 1;
            publish.sent_at = now;
            resend_pubs.push(MqttPacket::Publish {
                topic: publish.topic.clone(),
                payload: publish.payload.clone(),
                qos: QoS::AtLeastOnce,
                packet_id: Some(id),
                dup: true,
                retain: false,
            });
        }
    }
    for packet in resend_pubs {
        session.send(now, packet, actions);
    }
    for (id, attempts) in failed_pubs {
        session.inflight.remove(&id);
        actions.push(ClientAction::Error(ClientError::PublishTimeout { packet_id: id, attempts }));
    }

    // Keep-alive ping when the send side has been idle too long.
    if session.cfg.keep_alive_s > 0 {
        let idle_limit = Millis::from(session.cfg.keep_alive_s) * 750; // 75% of keep-alive
        if now - session.last_send >= idle_limit {
            session.send(now, MqttPacket::PingReq, actions);
        }
    }
}
