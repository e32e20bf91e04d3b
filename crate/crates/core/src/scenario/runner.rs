//! Single-driver discrete-event execution of a scenario.
//!
//! One loop owns everything: the simulated star, one broker instance per
//! protocol endpoint on the gateway host, the gateway's per-protocol ingest
//! sessions (plus optional upstream hop), and every node runtime. Events are
//! processed in (time, sequence) order with transport deliveries first, so a
//! (seed, spec) pair maps to byte-identical store files, delivery logs and
//! stats.

use super::{ScenarioError, ScenarioSpec};
use crate::gateway::{Gateway, GatewayConfig, IngestOutcome, IngestStats};
use crate::mqtt::{
    broker_step, client_step, decode_packet, encode_packet, BrokerAction, BrokerEvent, BrokerState,
    ClientAction, ClientEvent, MqttPacket, QoS, Session, SessionConfig,
};
use crate::node::{NodeReport, NodeRuntime, SyntheticSource};
use crate::sim::segment::{split, Reassembler};
use crate::sim::{Delivery, EndpointId, LinkCounters, Protocol, SimWorld};
use crate::store::TelemetryStore;
use crate::{Millis, DEFAULT_VREF};
use serde::Serialize;
use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::path::{Path, PathBuf};

/// Conn id the gateway's ingest session uses on each per-protocol broker.
const GW_CONN: &str = "gw";
/// Conn ids on the upstream broker.
const UPSTREAM_PUB_CONN: &str = "gw-up";
const UPSTREAM_SINK_CONN: &str = "up-sink";
/// Driver tick cadence; retries and keep-alives resolve on this grid.
const TICK_MS: Millis = 1_000;
/// Extra simulated time allowed after `duration_ms` for in-flight traffic to
/// settle before the run is cut off.
const DRAIN_GRACE_MS: Millis = 60_000;

/// Machine-readable summary written at the end of a run.
#[derive(Debug, Clone, Serialize)]
pub struct ScenarioStats {
    pub seed: u64,
    pub duration_ms: Millis,
    pub ended_at_ms: Millis,
    pub gateway: IngestStats,
    pub nodes: BTreeMap<String, NodeReport>,
    pub transport: BTreeMap<String, LinkCounters>,
    pub upstream_received: u64,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub stats: ScenarioStats,
    pub store_path: PathBuf,
    pub delivery_log_path: PathBuf,
    pub stats_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    Sample(String),
    Tick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ClientRef {
    GwIngest(Protocol),
    GwUpstream,
    UpstreamSink,
}

enum Work {
    Broker { protocol: Protocol, event: BrokerEvent },
    UpstreamBroker { event: BrokerEvent },
    Client { who: ClientRef, packet: MqttPacket },
}

struct Driver {
    world: SimWorld,
    brokers: BTreeMap<Protocol, BrokerState>,
    gw_sessions: BTreeMap<Protocol, Session>,
    gateway: Gateway,
    store: TelemetryStore,
    nodes: BTreeMap<String, NodeRuntime>,
    node_order: Vec<String>,
    /// Reassembles node->gateway segments, one stream per node.
    gw_reasm: BTreeMap<String, Reassembler>,
    /// Segmentation sequence for gateway->node streams.
    gw_seg_seq: BTreeMap<String, u16>,
    upstream_broker: Option<BrokerState>,
    upstream_session: Option<Session>,
    sink_session: Option<Session>,
    upstream_received: u64,
    work: VecDeque<Work>,
    now: Millis,
}

impl Driver {
    fn new(spec: &ScenarioSpec, store_path: &Path) -> Result<Driver, ScenarioError> {
        let world = SimWorld::new(spec.seed, spec.link_profiles()?)?;
        let gw_cfg = GatewayConfig {
            subscribe_filter: spec.gateway.subscribe_filter.clone(),
            upstream: spec.gateway.upstream.then(|| "sim-upstream".to_string()),
            dedup_window: spec.gateway.dedup_window,
        };
        let mut driver = Driver {
            world,
            brokers: Protocol::ALL.into_iter().map(|p| (p, BrokerState::new())).collect(),
            gw_sessions: BTreeMap::new(),
            gateway: Gateway::new(gw_cfg),
            store: TelemetryStore::create(store_path)?,
            nodes: BTreeMap::new(),
            node_order: Vec::new(),
            gw_reasm: BTreeMap::new(),
            gw_seg_seq: BTreeMap::new(),
            upstream_broker: None,
            upstream_session: None,
            sink_session: None,
            upstream_received: 0,
            work: VecDeque::new(),
            now: 0,
        };
        driver.setup(spec)?;
        Ok(driver)
    }

    /// Brings up brokers, gateway sessions, the optional upstream hop and all
    /// nodes, everything at t = 0.
    fn setup(&mut self, spec: &ScenarioSpec) -> Result<(), ScenarioError> {
        // The gateway subscribes on all three protocols simultaneously; its
        // sessions talk to the co-located broker instances directly.
        for protocol in Protocol::ALL {
            let mut session = Session::new(SessionConfig {
                client_id: format!("gw-{protocol}"),
                keep_alive_s: 0,
            });
            self.push_broker(protocol, BrokerEvent::Connected { conn: GW_CONN.into() });
            let mut actions = client_step(&mut session, 0, ClientEvent::Start);
            actions.extend(client_step(
                &mut session,
                0,
                ClientEvent::Subscribe {
                    filters: vec![(spec.gateway.subscribe_filter.clone(), QoS::AtLeastOnce)],
                },
            ));
            self.gw_sessions.insert(protocol, session);
            self.handle_client_actions(ClientRef::GwIngest(protocol), actions)?;
        }

        if spec.gateway.upstream {
            self.upstream_broker = Some(BrokerState::new());
            self.push_upstream(BrokerEvent::Connected { conn: UPSTREAM_PUB_CONN.into() });
            self.push_upstream(BrokerEvent::Connected { conn: UPSTREAM_SINK_CONN.into() });

            let mut publisher = Session::new(SessionConfig {
                client_id: UPSTREAM_PUB_CONN.into(),
                keep_alive_s: 0,
            });
            let actions = client_step(&mut publisher, 0, ClientEvent::Start);
            self.upstream_session = Some(publisher);
            self.handle_client_actions(ClientRef::GwUpstream, actions)?;

            let mut sink = Session::new(SessionConfig {
                client_id: UPSTREAM_SINK_CONN.into(),
                keep_alive_s: 0,
            });
            let mut actions = client_step(&mut sink, 0, ClientEvent::Start);
            actions.extend(client_step(
                &mut sink,
                0,
                ClientEvent::Subscribe { filters: vec![("#".into(), QoS::AtLeastOnce)] },
            ));
            self.sink_session = Some(sink);
            self.handle_client_actions(ClientRef::UpstreamSink, actions)?;
        }
        self.drain_work()?;

        for node_spec in &spec.nodes {
            let cfg = spec.node_config(node_spec)?;
            let source = SyntheticSource::new(spec.seed, &cfg.node_id, cfg.calibration.clone(), DEFAULT_VREF)
                .with_environment(spec.environment.offset_scale, spec.environment.noise_scale);
            let mut runtime = NodeRuntime::new(cfg, Box::new(source))?;
            let node_id = runtime.cfg.node_id.clone();
            self.world.attach(&node_id, runtime.cfg.protocol)?;
            self.push_broker(runtime.cfg.protocol, BrokerEvent::Connected { conn: node_id.clone() });
            self.gw_reasm.insert(node_id.clone(), Reassembler::new());
            self.gw_seg_seq.insert(node_id.clone(), 0);
            let actions = runtime.start(0);
            self.nodes.insert(node_id.clone(), runtime);
            self.node_order.push(node_id.clone());
            self.handle_node_actions(&node_id, actions)?;
        }
        self.drain_work()
    }

    fn push_broker(&mut self, protocol: Protocol, event: BrokerEvent) {
        self.work.push_back(Work::Broker { protocol, event });
    }

    fn push_upstream(&mut self, event: BrokerEvent) {
        self.work.push_back(Work::UpstreamBroker { event });
    }

    /// Runs queued same-timestamp exchanges (gateway sessions <-> brokers) to
    /// quiescence.
    fn drain_work(&mut self) -> Result<(), ScenarioError> {
        while let Some(item) = self.work.pop_front() {
            match item {
                Work::Broker { protocol, event } => {
                    let actions = broker_step(self.brokers.get_mut(&protocol).unwrap(), self.now, event);
                    self.handle_broker_actions(protocol, actions)?;
                }
                Work::UpstreamBroker { event } => {
                    if let Some(broker) = self.upstream_broker.as_mut() {
                        let actions = broker_step(broker, self.now, event);
                        self.handle_upstream_broker_actions(actions)?;
                    }
                }
                Work::Client { who, packet } => {
                    let event = ClientEvent::PacketIn(packet);
                    let actions = match who {
                        ClientRef::GwIngest(p) => {
                            client_step(self.gw_sessions.get_mut(&p).unwrap(), self.now, event)
                        }
                        ClientRef::GwUpstream => {
                            client_step(self.upstream_session.as_mut().unwrap(), self.now, event)
                        }
                        ClientRef::UpstreamSink => {
                            client_step(self.sink_session.as_mut().unwrap(), self.now, event)
                        }
                    };
                    self.handle_client_actions(who, actions)?;
                }
            }
        }
        Ok(())
    }

    fn handle_broker_actions(&mut self, protocol: Protocol, actions: Vec<BrokerAction>) -> Result<(), ScenarioError> {
        for action in actions {
            match action {
                BrokerAction::Send { conn, packet } => {
                    if conn == GW_CONN {
                        self.work.push_back(Work::Client { who: ClientRef::GwIngest(protocol), packet });
                    } else {
                        self.send_to_node(&conn, &packet)?;
                    }
                }
                // A closed node conn tears nothing down on the sim transport;
                // the node's own retries will fail and surface in its report.
                BrokerAction::Close { .. } => {}
            }
        }
        Ok(())
    }

    fn handle_upstream_broker_actions(&mut self, actions: Vec<BrokerAction>) -> Result<(), ScenarioError> {
        for action in actions {
            if let BrokerAction::Send { conn, packet } = action {
                let who = if conn == UPSTREAM_PUB_CONN { ClientRef::GwUpstream } else { ClientRef::UpstreamSink };
                self.work.push_back(Work::Client { who, packet });
            }
        }
        Ok(())
    }

    fn handle_client_actions(&mut self, who: ClientRef, actions: Vec<ClientAction>) -> Result<(), ScenarioError> {
        for action in actions {
            match (who, action) {
                (ClientRef::GwIngest(p), ClientAction::Send(packet)) => {
                    self.push_broker(p, BrokerEvent::PacketIn { conn: GW_CONN.into(), packet });
                }
                (ClientRef::GwIngest(_), ClientAction::Deliver { topic, payload }) => {
                    self.ingest(&topic, &payload)?;
                }
                (ClientRef::GwUpstream, ClientAction::Send(packet)) => {
                    self.push_upstream(BrokerEvent::PacketIn { conn: UPSTREAM_PUB_CONN.into(), packet });
                }
                (ClientRef::UpstreamSink, ClientAction::Send(packet)) => {
                    self.push_upstream(BrokerEvent::PacketIn { conn: UPSTREAM_SINK_CONN.into(), packet });
                }
                (ClientRef::UpstreamSink, ClientAction::Deliver { .. }) => {
                    self.upstream_received += 1;
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn ingest(&mut self, topic: &str, payload: &[u8]) -> Result<(), ScenarioError> {
        let outcome = self.gateway.ingest(&mut self.store, topic, payload)?;
        if outcome == IngestOutcome::Stored && self.upstream_session.is_some() {
            // Store-then-forward: republish upstream at qos 1.
            while let Some((topic, payload)) = self.gateway.take_upstream() {
                let actions = client_step(
                    self.upstream_session.as_mut().unwrap(),
                    self.now,
                    ClientEvent::Publish { topic, payload, qos: QoS::AtLeastOnce },
                );
                self.handle_client_actions(ClientRef::GwUpstream, actions)?;
            }
        }
        Ok(())
    }

    fn handle_node_actions(&mut self, node_id: &str, actions: Vec<ClientAction>) -> Result<(), ScenarioError> {
        for action in actions {
            if let ClientAction::Send(packet) = action {
                self.send_from_node(node_id, &packet)?;
            }
        }
        Ok(())
    }

    fn send_from_node(&mut self, node_id: &str, packet: &MqttPacket) -> Result<(), ScenarioError> {
        let bytes = encode_packet(packet).expect("sessions emit valid packets");
        let runtime = self.nodes.get_mut(node_id).unwrap();
        let protocol = runtime.cfg.protocol;
        let group = runtime.next_group_seq();
        let max_frame = self.world.profile(protocol).max_frame;
        let frames = split(group, &bytes, max_frame)
            .map_err(|e| ScenarioError::Spec(format!("packet exceeds link capacity: {e}")))?;
        for frame in frames {
            match self.world.send(&EndpointId::Node(node_id.into()), &EndpointId::Gateway(protocol), &frame) {
                Ok(_) => {}
                Err(crate::sim::SimError::UnknownNode(_)) | Err(crate::sim::SimError::NoPeer(_)) => {
                    // Link down under the node: abort it with a partial report.
                    self.nodes.get_mut(node_id).unwrap().report.errors += 1;
                    return Ok(());
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }

    fn send_to_node(&mut self, node_id: &str, packet: &MqttPacket) -> Result<(), ScenarioError> {
        let Some(runtime) = self.nodes.get(node_id) else { return Ok(()) };
        let protocol = runtime.cfg.protocol;
        let bytes = encode_packet(packet).expect("brokers emit valid packets");
        let seq = self.gw_seg_seq.get_mut(node_id).unwrap();
        let group = *seq;
        *seq = seq.wrapping_add(1);
        let max_frame = self.world.profile(protocol).max_frame;
        let frames = split(group, &bytes, max_frame)
            .map_err(|e| ScenarioError::Spec(format!("packet exceeds link capacity: {e}")))?;
        for frame in frames {
            match self.world.send(&EndpointId::Gateway(protocol), &EndpointId::Node(node_id.into()), &frame) {
                Ok(_) => {}
                Err(crate::sim::SimError::UnknownNode(_)) | Err(crate::sim::SimError::NoPeer(_)) => return Ok(()),
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }

    fn handle_delivery(&mut self, delivery: Delivery) -> Result<(), ScenarioError> {
        self.now = delivery.at;
        match (&delivery.to, &delivery.from) {
            (EndpointId::Gateway(protocol), EndpointId::Node(node_id)) => {
                let Some(reassembler) = self.gw_reasm.get_mut(node_id) else { return Ok(()) };
                if let Ok(Some(bytes)) = reassembler.accept(&delivery.frame) {
                    match decode_packet(&bytes) {
                        Ok((packet, consumed)) if consumed == bytes.len() => {
                            self.push_broker(
                                *protocol,
                                BrokerEvent::PacketIn { conn: node_id.clone(), packet },
                            );
                        }
                        // A reassembled group that is not exactly one packet
                        // is a corrupt stream: the connection must close.
                        _ => {
                            self.push_broker(*protocol, BrokerEvent::ConnectionClosed { conn: node_id.clone() });
                        }
                    }
                }
            }
            (EndpointId::Node(node_id), EndpointId::Gateway(_)) => {
                let node_id = node_id.clone();
                let mut decoded = None;
                if let Some(runtime) = self.nodes.get_mut(&node_id) {
                    if let Ok(Some(bytes)) = runtime.reassembler.accept(&delivery.frame) {
                        match decode_packet(&bytes) {
                            Ok((packet, consumed)) if consumed == bytes.len() => decoded = Some(packet),
                            _ => runtime.report.errors += 1,
                        }
                    }
                }
                if let Some(packet) = decoded {
                    let actions = self.nodes.get_mut(&node_id).unwrap().handle_packet(self.now, packet);
                    self.handle_node_actions(&node_id, actions)?;
                }
            }
            _ => {}
        }
        self.drain_work()
    }

    fn global_tick(&mut self, t: Millis) -> Result<(), ScenarioError> {
        self.now = t;
        for node_id in self.node_order.clone() {
            let actions = self.nodes.get_mut(&node_id).unwrap().tick(t);
            self.handle_node_actions(&node_id, actions)?;
        }
        for protocol in Protocol::ALL {
            let actions = broker_step(self.brokers.get_mut(&protocol).unwrap(), t, BrokerEvent::Tick);
            self.handle_broker_actions(protocol, actions)?;
            let actions = client_step(self.gw_sessions.get_mut(&protocol).unwrap(), t, ClientEvent::Tick);
            self.handle_client_actions(ClientRef::GwIngest(protocol), actions)?;
        }
        if let Some(broker) = self.upstream_broker.as_mut() {
            let actions = broker_step(broker, t, BrokerEvent::Tick);
            self.handle_upstream_broker_actions(actions)?;
            let actions = client_step(self.upstream_session.as_mut().unwrap(), t, ClientEvent::Tick);
            self.handle_client_actions(ClientRef::GwUpstream, actions)?;
            let actions = client_step(self.sink_session.as_mut().unwrap(), t, ClientEvent::Tick);
            self.handle_client_actions(ClientRef::UpstreamSink, actions)?;
        }
        self.drain_work()
    }

    fn sample(&mut self, node_id: &str, t: Millis) -> Result<(), ScenarioError> {
        self.now = t;
        let actions = self.nodes.get_mut(node_id).unwrap().sample(t);
        self.handle_node_actions(node_id, actions)?;
        self.drain_work()
    }

    /// Nothing queued, in flight, or awaiting acknowledgment anywhere.
    fn quiescent(&self) -> bool {
        self.world.in_flight() == 0
            && self.work.is_empty()
            && self.nodes.values().all(|rt| rt.session.is_failed() || !rt.session.is_busy())
            && self.gw_sessions.values().all(|s| !s.is_busy())
            && self.brokers.values().all(|b| b.inflight_total() == 0)
            && self.upstream_session.as_ref().is_none_or(|s| !s.is_busy())
            && self.sink_session.as_ref().is_none_or(|s| !s.is_busy())
            && self.upstream_broker.as_ref().is_none_or(|b| b.inflight_total() == 0)
            && self.gateway.upstream_backlog() == 0
    }

    fn execute(mut self, spec: &ScenarioSpec) -> Result<(Self, Millis), ScenarioError> {
        let until = spec.duration_ms;
        let drain_limit = until + DRAIN_GRACE_MS;
        let mut events: BinaryHeap<Reverse<(Millis, u64, Ev)>> = BinaryHeap::new();
        let mut seq = 0u64;
        let push = |events: &mut BinaryHeap<_>, t: Millis, ev: Ev, seq: &mut u64| {
            events.push(Reverse((t, *seq, ev)));
            *seq += 1;
        };
        for node_id in self.node_order.clone() {
            push(&mut events, 0, Ev::Sample(node_id), &mut seq);
        }
        push(&mut events, TICK_MS.min(drain_limit), Ev::Tick, &mut seq);

        let mut ended_at = 0;
        while let Some(Reverse((t_event, _, _))) = events.peek().cloned() {
            // Transport deliveries due at or before the next event go first.
            while let Some(t_delivery) = self.world.next_delivery_at() {
                if t_delivery > t_event {
                    break;
                }
                for delivery in self.world.advance(t_delivery)? {
                    self.handle_delivery(delivery)?;
                }
            }
            let Reverse((t, _, event)) = events.pop().unwrap();
            self.world.advance(t)?;
            ended_at = t;
            match event {
                Ev::Sample(node_id) => {
                    self.sample(&node_id, t)?;
                    let interval = self.nodes[&node_id].cfg.sample_interval_ms;
                    if t + interval <= until {
                        push(&mut events, t + interval, Ev::Sample(node_id), &mut seq);
                    }
                }
                Ev::Tick => {
                    self.global_tick(t)?;
                    let keep_going = t < until || !self.quiescent();
                    if keep_going && t + TICK_MS <= drain_limit {
                        push(&mut events, t + TICK_MS, Ev::Tick, &mut seq);
                    }
                }
            }
        }
        self.store.sync()?;
        Ok((self, ended_at))
    }
}

/// Executes the scenario, writing the store, delivery log and stats under
/// `out_base` (relative output paths resolve against it).
pub fn run(spec: &ScenarioSpec, out_base: &Path) -> Result<RunArtifacts, ScenarioError> {
    spec.validate()?;
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { out_base.join(p) };
    let store_path = resolve(&spec.outputs.store);
    let delivery_log_path = resolve(&spec.outputs.delivery_log);
    let stats_path = resolve(&spec.outputs.stats);

    let driver = Driver::new(spec, &store_path)?;
    let (driver, ended_at) = driver.execute(spec)?;

    let stats = ScenarioStats {
        seed: spec.seed,
        duration_ms: spec.duration_ms,
        ended_at_ms: ended_at,
        gateway: driver.gateway.stats.clone(),
        nodes: driver.nodes.iter().map(|(id, rt)| (id.clone(), rt.report)).collect(),
        transport: driver.world.counters().clone(),
        upstream_received: driver.upstream_received,
    };

    if let Some(parent) = delivery_log_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut log_text = String::new();
    for record in driver.world.log() {
        log_text.push_str(&serde_json::to_string(record).expect("log records serialize"));
        log_text.push('\n');
    }
    std::fs::write(&delivery_log_path, log_text)?;

    if let Some(parent) = stats_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let stats_text = serde_json::to_string_pretty(&stats).expect("stats serialize");
    std::fs::write(&stats_path, stats_text)?;

    Ok(RunArtifacts { stats, store_path, delivery_log_path, stats_path })
}
