//! Gateway ingest: validate, deduplicate, store, queue for upstream.
//!
//! At-least-once delivery means redeliveries are normal; the gateway collapses
//! them to exactly-once storage through the (node_id, name, captured_at) key,
//! checked against a bounded recently-seen window and, behind that, the
//! store's own index. Every failure is a counted outcome, never an exception:
//! the stats always satisfy received = stored + duplicates + rejected.

use crate::node::{parse_packet, DataPacket};
use crate::sensor::{in_range, VariableKind};
use crate::sim::Protocol;
use crate::store::{StoreError, TelemetryStore};
use crate::Millis;
use serde::Serialize;
use std::collections::{BTreeMap, HashSet, VecDeque};

/// Packets queued for the upstream broker before the oldest is shed.
pub const UPSTREAM_QUEUE_CAP: usize = 1_000;

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    /// Filter each ingest session subscribes with.
    pub subscribe_filter: String,
    /// Upstream broker address; `None` runs standalone.
    pub upstream: Option<String>,
    /// Recently-seen dedup keys retained.
    pub dedup_window: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig { subscribe_filter: "station/#".to_string(), upstream: None, dedup_window: 10_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    Parse,
    TopicMismatch,
    UnitMismatch,
    Range,
}

impl RejectReason {
    pub fn name(self) -> &'static str {
        match self {
            RejectReason::Parse => "parse",
            RejectReason::TopicMismatch => "topic_mismatch",
            RejectReason::UnitMismatch => "unit_mismatch",
            RejectReason::Range => "range",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum IngestOutcome {
    Stored,
    Duplicate,
    Rejected(RejectReason),
}

/// Ingest accounting; `received = stored + duplicates + rejected` always.
#[derive(Debug, Clone, Default, Serialize)]
pub struct IngestStats {
    pub received: u64,
    pub stored: u64,
    pub duplicates: u64,
    pub rejected: u64,
    pub per_protocol: BTreeMap<Protocol, u64>,
    pub rejected_reasons: BTreeMap<String, u64>,
    pub upstream_forwarded: u64,
    pub upstream_dropped: u64,
}

impl IngestStats {
    pub fn conserved(&self) -> bool {
        self.received == self.stored + self.duplicates + self.rejected
    }
}

/// Bounded recently-seen key set; oldest evicted first.
#[derive(Debug, Default)]
struct DedupWindow {
    cap: usize,
    seen: HashSet<(String, String, Millis)>,
    order: VecDeque<(String, String, Millis)>,
}

impl DedupWindow {
    fn new(cap: usize) -> DedupWindow {
        DedupWindow { cap: cap.max(1), ..Default::default() }
    }

    fn contains(&self, key: &(String, String, Millis)) -> bool {
        self.seen.contains(key)
    }

    fn insert(&mut self, key: (String, String, Millis)) {
        if self.seen.insert(key.clone()) {
            self.order.push_back(key);
            while self.order.len() > self.cap {
                let evicted = self.order.pop_front().unwrap();
                self.seen.remove(&evicted);
            }
        }
    }
}

pub struct Gateway {
    pub cfg: GatewayConfig,
    pub stats: IngestStats,
    dedup: DedupWindow,
    upstream_queue: VecDeque<(String, Vec<u8>)>,
}

impl Gateway {
    pub fn new(cfg: GatewayConfig) -> Gateway {
        let dedup = DedupWindow::new(cfg.dedup_window);
        Gateway { cfg, stats: IngestStats::default(), dedup, upstream_queue: VecDeque::new() }
    }

    /// Validates and stores one inbound publish.
    ///
    /// Only I/O failures propagate; every protocol-level failure is a counted
    /// outcome.
    pub fn ingest(
        &mut self,
        store: &mut TelemetryStore,
        topic: &str,
        payload: &[u8],
    ) -> Result<IngestOutcome, StoreError> {
        self.stats.received += 1;
        let outcome = self.classify(store, topic, payload)?;
        match &outcome {
            IngestOutcome::Stored => self.stats.stored += 1,
            IngestOutcome::Duplicate => self.stats.duplicates += 1,
            IngestOutcome::Rejected(reason) => {
                self.stats.rejected += 1;
                *self.stats.rejected_reasons.entry(reason.name().to_string()).or_default() += 1;
            }
        }
        debug_assert!(self.stats.conserved());
        Ok(outcome)
    }

    fn classify(
        &mut self,
        store: &mut TelemetryStore,
        topic: &str,
        payload: &[u8],
    ) -> Result<IngestOutcome, StoreError> {
        let Ok(packet) = parse_packet(payload) else {
            return Ok(IngestOutcome::Rejected(RejectReason::Parse));
        };
        *self.stats.per_protocol.entry(packet.protocol).or_default() += 1;

        // The topic must agree with the payload's own identity fields.
        if topic != packet.topic() {
            return Ok(IngestOutcome::Rejected(RejectReason::TopicMismatch));
        }
        let Some(kind) = VariableKind::from_name(&packet.name) else {
            return Ok(IngestOutcome::Rejected(RejectReason::UnitMismatch));
        };
        if packet.units != kind.unit() {
            return Ok(IngestOutcome::Rejected(RejectReason::UnitMismatch));
        }
        if !in_range(kind, packet.value) {
            return Ok(IngestOutcome::Rejected(RejectReason::Range));
        }

        let key = packet.key();
        if self.dedup.contains(&key) {
            return Ok(IngestOutcome::Duplicate);
        }
        match store.append(packet.clone()) {
            Ok(()) => {
                self.dedup.insert(key);
                self.queue_upstream(&packet, payload);
                Ok(IngestOutcome::Stored)
            }
            // Slipped past the window but the store still knows it.
            Err(StoreError::DuplicateKey { .. }) => {
                self.dedup.insert(key);
                Ok(IngestOutcome::Duplicate)
            }
            Err(e) => Err(e),
        }
    }

    fn queue_upstream(&mut self, packet: &DataPacket, payload: &[u8]) {
        if self.cfg.upstream.is_none() {
            return;
        }
        self.upstream_queue.push_back((packet.topic(), payload.to_vec()));
        while self.upstream_queue.len() > UPSTREAM_QUEUE_CAP {
            self.upstream_queue.pop_front();
            self.stats.upstream_dropped += 1;
        }
    }

    /// Next packet to republish upstream, store-then-forward order.
    pub fn take_upstream(&mut self) -> Option<(String, Vec<u8>)> {
        let item = self.upstream_queue.pop_front();
        if item.is_some() {
            self.stats.upstream_forwarded += 1;
        }
        item
    }

    pub fn upstream_backlog(&self) -> usize {
        self.upstream_queue.len()
    }
}
