//! Seeded end-to-end scenarios: a JSON spec binds nodes, link profiles,
//! broker placement, gateway config and duration; the runner executes it as a
//! single-driver discrete-event simulation.

mod runner;

pub use runner::{run, RunArtifacts, ScenarioStats};

use crate::mqtt::QoS;
use crate::node::NodeConfig;
use crate::sensor::{CalibrationConfig, CalibrationTable, VariableKind};
use crate::sim::{default_profiles, LinkProfile, Protocol};
use crate::Millis;
use serde::Deserialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario spec: {0}")]
    Spec(String),
    #[error("transport: {0}")]
    Sim(#[from] crate::sim::SimError),
    #[error("store: {0}")]
    Store(#[from] crate::store::StoreError),
    #[error("node: {0}")]
    Node(#[from] crate::node::NodeError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Partial per-protocol override of the default link profile.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileOverride {
    pub latency_ms: Option<u64>,
    pub jitter_ms: Option<u64>,
    pub loss_prob: Option<f64>,
    pub max_frame: Option<usize>,
}

impl ProfileOverride {
    fn apply(&self, base: LinkProfile) -> LinkProfile {
        LinkProfile {
            latency_ms: self.latency_ms.unwrap_or(base.latency_ms),
            jitter_ms: self.jitter_ms.unwrap_or(base.jitter_ms),
            loss_prob: self.loss_prob.unwrap_or(base.loss_prob),
            max_frame: self.max_frame.unwrap_or(base.max_frame),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub node_id: String,
    pub protocol: Protocol,
    #[serde(default = "default_interval")]
    pub sample_interval_ms: Millis,
    /// Defaults to all six variables.
    pub sensors: Option<Vec<VariableKind>>,
    #[serde(default = "default_qos")]
    pub qos: u8,
    pub calibration: Option<CalibrationConfig>,
}

fn default_interval() -> Millis {
    12_000
}

fn default_qos() -> u8 {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewaySpec {
    #[serde(default = "default_filter")]
    pub subscribe_filter: String,
    #[serde(default)]
    pub upstream: bool,
    #[serde(default = "default_dedup_window")]
    pub dedup_window: usize,
}

impl Default for GatewaySpec {
    fn default() -> Self {
        GatewaySpec {
            subscribe_filter: default_filter(),
            upstream: false,
            dedup_window: default_dedup_window(),
        }
    }
}

fn default_filter() -> String {
    "station/#".to_string()
}

fn default_dedup_window() -> usize {
    10_000
}

/// Synthetic-environment knobs; 1.0 keeps colocated-node bounds.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSpec {
    #[serde(default = "default_scale")]
    pub offset_scale: f64,
    #[serde(default = "default_scale")]
    pub noise_scale: f64,
}

impl Default for EnvironmentSpec {
    fn default() -> Self {
        EnvironmentSpec { offset_scale: 1.0, noise_scale: 1.0 }
    }
}

fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub store: PathBuf,
    pub delivery_log: PathBuf,
    pub stats: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub seed: u64,
    pub duration_ms: Millis,
    /// Broker placement; the broker runs on the gateway host, as deployed.
    #[serde(default = "default_broker")]
    pub broker: String,
    #[serde(default)]
    pub profiles: BTreeMap<Protocol, ProfileOverride>,
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub gateway: GatewaySpec,
    #[serde(default)]
    pub environment: EnvironmentSpec,
    pub outputs: OutputSpec,
}

fn default_broker() -> String {
    "gateway".to_string()
}

impl ScenarioSpec {
    pub fn from_json(text: &str) -> Result<ScenarioSpec, ScenarioError> {
        let spec: ScenarioSpec =
            serde_json::from_str(text).map_err(|e| ScenarioError::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<ScenarioSpec, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::Spec(format!("{}: {e}", path.display())))?;
        ScenarioSpec::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let field = |msg: String| Err(ScenarioError::Spec(msg));
        if self.duration_ms < 0 {
            return field(format!("duration_ms: must be >= 0, got {}", self.duration_ms));
        }
        if self.broker != "gateway" {
            return field(format!(
                "broker: only \"gateway\" placement is supported, got {:?}",
                self.broker
            ));
        }
        if self.nodes.is_empty() {
            return field("nodes: at least one node is required".to_string());
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if self.nodes[..i].iter().any(|n| n.node_id == node.node_id) {
                return field(format!("nodes[{i}].node_id: duplicate id {:?}", node.node_id));
            }
            if node.qos > 1 {
                return field(format!("nodes[{i}].qos: must be 0 or 1, got {}", node.qos));
            }
            self.node_config(node).map_err(|e| {
                ScenarioError::Spec(format!("nodes[{i}] ({}): {e}", node.node_id))
            })?;
        }
        if !crate::mqtt::valid_filter(&self.gateway.subscribe_filter) {
            return field(format!(
                "gateway.subscribe_filter: {:?} is not a valid topic filter",
                self.gateway.subscribe_filter
            ));
        }
        if !(self.environment.offset_scale >= 0.0 && self.environment.noise_scale >= 0.0) {
            return field("environment: scales must be >= 0".to_string());
        }
        for profile in self.link_profiles()?.values() {
            profile.validate()?;
        }
        Ok(())
    }

    /// Defaults with the spec's overrides applied.
    pub fn link_profiles(&self) -> Result<BTreeMap<Protocol, LinkProfile>, ScenarioError> {
        let mut profiles = default_profiles();
        for (protocol, over) in &self.profiles {
            let base = profiles[protocol];
            profiles.insert(*protocol, over.apply(base));
        }
        Ok(profiles)
    }

    /// Builds and validates one node's runtime config.
    pub fn node_config(&self, node: &NodeSpec) -> Result<NodeConfig, ScenarioError> {
        let calibration = match &node.calibration {
            Some(cfg) => CalibrationTable::from_config(cfg.clone())
                .map_err(|e| ScenarioError::Spec(format!("calibration: {e}")))?,
            None => CalibrationTable::default(),
        };
        let cfg = NodeConfig {
            node_id: node.node_id.clone(),
            protocol: node.protocol,
            sample_interval_ms: node.sample_interval_ms,
            sensors: node.sensors.clone().unwrap_or_else(|| VariableKind::ALL.to_vec()),
            calibration,
            qos: if node.qos == 0 { QoS::AtMostOnce } else { QoS::AtLeastOnce },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(nodes: &str) -> String {
        format!(
            r#"{{
                "seed": 7,
                "duration_ms": 60000,
                "nodes": {nodes},
                "outputs": {{
                    "store": "out/store.jsonl",
                    "delivery_log": "out/delivery.jsonl",
                    "stats": "out/stats.json"
                }}
            }}"#
        )
    }

    #[test]
    fn minimal_spec_parses_with_defaults() {
        let spec = ScenarioSpec::from_json(&minimal(
            r#"[{"node_id": "n1", "protocol": "wifi"}]"#,
        ))
        .unwrap();
        assert_eq!(spec.broker, "gateway");
        assert_eq!(spec.gateway.subscribe_filter, "station/#");
        let cfg = spec.node_config(&spec.nodes[0]).unwrap();
        assert_eq!(cfg.sample_interval_ms, 12_000);
        assert_eq!(cfg.sensors.len(), 6);
        assert_eq!(cfg.qos, QoS::AtLeastOnce);
    }

    #[test]
    fn duplicate_node_ids_rejected_with_the_id_named() {
        let err = ScenarioSpec::from_json(&minimal(
            r#"[{"node_id": "n1", "protocol": "wifi"}, {"node_id": "n1", "protocol": "zigbee"}]"#,
        ))
        .unwrap_err();
        assert!(err.to_string().contains("n1"), "{err}");
        assert!(err.to_string().contains("nodes[1]"), "{err}");
    }

    #[test]
    fn unknown_protocol_rejected() {
        assert!(ScenarioSpec::from_json(&minimal(
            r#"[{"node_id": "n1", "protocol": "lora"}]"#,
        ))
        .is_err());
    }

    #[test]
    fn profile_overrides_apply_partially() {
        let json = r#"{
            "seed": 1, "duration_ms": 0,
            "profiles": {"zigbee": {"loss_prob": 0.2}},
            "nodes": [{"node_id": "n1", "protocol": "zigbee"}],
            "outputs": {"store": "s", "delivery_log": "d", "stats": "t"}
        }"#;
        let spec = ScenarioSpec::from_json(json).unwrap();
        let profiles = spec.link_profiles().unwrap();
        assert_eq!(profiles[&Protocol::Zigbee].loss_prob, 0.2);
        assert_eq!(profiles[&Protocol::Zigbee].latency_ms, 50);
    }

    #[test]
    fn bad_qos_rejected() {
        assert!(ScenarioSpec::from_json(&minimal(
            r#"[{"node_id": "n1", "protocol": "wifi", "qos": 2}]"#,
        ))
        .is_err());
    }

    #[test]
    fn non_gateway_broker_placement_rejected() {
        let json = r#"{
            "seed": 1, "duration_ms": 0, "broker": "cloud",
            "nodes": [{"node_id": "n1", "protocol": "wifi"}],
            "outputs": {"store": "s", "delivery_log": "d", "stats": "t"}
        }"#;
        let err = ScenarioSpec::from_json(json).unwrap_err();
        assert!(err.to_string().contains("broker"));
    }
}
