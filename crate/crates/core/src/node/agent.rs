//! Per-node runtime: one MQTT session, one sample schedule, one link.
//!
//! The scenario driver (or a live host) feeds it clock events and inbound
//! packets; it answers with client actions whose `Send`s the host carries
//! over the node's single protocol.

use super::{sample_once, NodeConfig, NodeError, NodeReport, SampleState, SensorSource};
use crate::mqtt::{client_step, ClientAction, ClientEvent, MqttPacket, Session, SessionConfig};
use crate::node::packet::serialize_packet;
use crate::sim::segment::Reassembler;
use crate::Millis;

pub struct NodeRuntime {
    pub cfg: NodeConfig,
    pub session: Session,
    /// Reassembles gateway->node segments.
    pub reassembler: Reassembler,
    seg_seq: u16,
    state: SampleState,
    source: Box<dyn SensorSource>,
    pub report: NodeReport,
}

impl NodeRuntime {
    pub fn new(cfg: NodeConfig, source: Box<dyn SensorSource>) -> Result<NodeRuntime, NodeError> {
        cfg.validate()?;
        let session = Session::new(SessionConfig {
            client_id: cfg.node_id.clone(),
            keep_alive_s: super::NODE_KEEP_ALIVE_S,
        });
        Ok(NodeRuntime {
            cfg,
            session,
            reassembler: Reassembler::new(),
            seg_seq: 0,
            state: SampleState::default(),
            source,
            report: NodeReport::default(),
        })
    }

    /// Segmentation group sequence for the next outbound MQTT packet.
    pub fn next_group_seq(&mut self) -> u16 {
        let seq = self.seg_seq;
        self.seg_seq = self.seg_seq.wrapping_add(1);
        seq
    }

    pub fn start(&mut self, now: Millis) -> Vec<ClientAction> {
        self.step(now, ClientEvent::Start)
    }

    pub fn tick(&mut self, now: Millis) -> Vec<ClientAction> {
        self.step(now, ClientEvent::Tick)
    }

    pub fn handle_packet(&mut self, now: Millis, packet: MqttPacket) -> Vec<ClientAction> {
        self.step(now, ClientEvent::PacketIn(packet))
    }

    /// Runs the measure/quantify routine at `t` and requests one publish per
    /// produced packet at the node's configured qos.
    pub fn sample(&mut self, t: Millis) -> Vec<ClientAction> {
        let outcome = sample_once(&self.cfg, self.source.as_ref(), &mut self.state, t);
        self.report.samples += 1;
        self.report.faults += u64::from(outcome.faults);
        let mut actions = Vec::new();
        for packet in outcome.packets {
            let topic = packet.topic();
            match serialize_packet(&packet) {
                Ok(payload) => {
                    self.report.published += 1;
                    actions.extend(self.step(
                        t,
                        ClientEvent::Publish { topic, payload, qos: self.cfg.qos },
                    ));
                }
                Err(_) => self.report.faults += 1,
            }
        }
        actions
    }

    fn step(&mut self, now: Millis, event: ClientEvent) -> Vec<ClientAction> {
        let actions = client_step(&mut self.session, now, event);
        for action in &actions {
            match action {
                ClientAction::Send(MqttPacket::Publish { dup: true, .. }) => {
                    self.report.retransmissions += 1;
                }
                ClientAction::Error(_) => self.report.errors += 1,
                _ => {}
            }
        }
        actions
    }
}
