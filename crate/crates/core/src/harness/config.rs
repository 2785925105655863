use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::expect::Expectation;
use crate::adversary::{AttackRegistry, AttackSetup, ColludeTunnel};
use crate::codec::NodeId;
use crate::crypto::{parse_key, Key};
use crate::node::ProtocolParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{path}: {msg}")]
    Validation { path: String, msg: String },
}

fn invalid(path: impl Into<String>, msg: impl Into<String>) -> ConfigError {
    ConfigError::Validation { path: path.into(), msg: msg.into() }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkChange {
    pub at_ms: u64,
    pub a: NodeId,
    pub b: NodeId,
    pub up: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    pub nodes: Vec<NodeId>,
    pub edges: Vec<(NodeId, NodeId)>,
    #[serde(default)]
    pub link_changes: Vec<LinkChange>,
    /// Display names for reports.
    #[serde(default)]
    pub labels: BTreeMap<String, NodeId>,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaConfig {
    pub a: NodeId,
    pub b: NodeId,
    /// 32 hex characters.
    pub key: String,
    #[serde(default = "yes")]
    pub persistent: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupConfig {
    pub id: String,
    pub key: String,
    pub members: Vec<NodeId>,
}

fn one() -> u32 {
    1
}

fn one_second() -> u64 {
    1000
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscoveryConfig {
    pub source: NodeId,
    pub target: NodeId,
    pub at_ms: u64,
    #[serde(default = "one")]
    pub count: u32,
    #[serde(default = "one_second")]
    pub interval_ms: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: NodeId,
    pub target: NodeId,
    pub at_ms: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RestartConfig {
    pub node: NodeId,
    pub at_ms: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedRoute {
    pub node: NodeId,
    pub route: Vec<NodeId>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackerConfig {
    pub node: NodeId,
    pub kind: String,
    #[serde(default)]
    pub params: serde_json::Value,
}

/// Hands the SA key of pair (a, b) to attacker `to`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeakConfig {
    pub to: NodeId,
    pub a: NodeId,
    pub b: NodeId,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub seed: u64,
    pub end_time_ms: u64,
    pub topology: TopologyConfig,
    #[serde(default)]
    pub security_associations: Vec<SaConfig>,
    #[serde(default)]
    pub groups: Vec<GroupConfig>,
    #[serde(default)]
    pub discoveries: Vec<DiscoveryConfig>,
    #[serde(default)]
    pub data: Vec<DataConfig>,
    #[serde(default)]
    pub restarts: Vec<RestartConfig>,
    #[serde(default)]
    pub seed_routes: Vec<SeedRoute>,
    #[serde(default)]
    pub attackers: Vec<AttackerConfig>,
    #[serde(default)]
    pub colluding_pair: Option<(NodeId, NodeId)>,
    #[serde(default)]
    pub leaked_keys: Vec<LeakConfig>,
    #[serde(default)]
    pub protocol: ProtocolParams,
    #[serde(default)]
    pub expect: Vec<Expectation>,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn label(&self, id: NodeId) -> String {
        self.topology
            .labels
            .iter()
            .find(|(_, &v)| v == id)
            .map(|(k, _)| k.clone())
            .unwrap_or_else(|| id.to_string())
    }

    /// A node label from the label table, or a plain numeric id.
    pub fn id(&self, label: &str) -> Option<NodeId> {
        self.topology.labels.get(label).copied().or_else(|| label.parse().ok().map(NodeId))
    }

    pub fn sa_key(&self, a: NodeId, b: NodeId) -> Option<Key> {
        self.security_associations
            .iter()
            .find(|s| (s.a, s.b) == (a, b) || (s.b, s.a) == (a, b))
            .and_then(|s| parse_key(&s.key).ok())
    }

    /// Keys leaked to `node`, by unordered pair.
    pub fn leaks_for(&self, node: NodeId) -> BTreeMap<(NodeId, NodeId), Key> {
        self.leaked_keys
            .iter()
            .filter(|l| l.to == node)
            .filter_map(|l| Some((crate::adversary::pair(l.a, l.b), self.sa_key(l.a, l.b)?)))
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_with(&AttackRegistry::builtin())
    }

    pub fn validate_with(&self, registry: &AttackRegistry) -> Result<(), ConfigError> {
        if self.end_time_ms == 0 {
            return Err(invalid("end_time_ms", "must be positive"));
        }
        let mut nodes = BTreeSet::new();
        for (i, n) in self.topology.nodes.iter().enumerate() {
            if !n.is_assigned() {
                return Err(invalid(format!("topology.nodes[{i}]"), "id 0 is reserved"));
            }
            if !nodes.insert(*n) {
                return Err(invalid(format!("topology.nodes[{i}]"), format!("duplicate node id {n}")));
            }
        }
        let known = |n: &NodeId, path: String| {
            if nodes.contains(n) {
                Ok(())
            } else {
                Err(invalid(path, format!("unknown node {n}")))
            }
        };
        let mut edges = BTreeSet::new();
        for (i, (a, b)) in self.topology.edges.iter().enumerate() {
            known(a, format!("topology.edges[{i}]"))?;
            known(b, format!("topology.edges[{i}]"))?;
            if a == b {
                return Err(invalid(format!("topology.edges[{i}]"), "self loop"));
            }
            edges.insert(crate::adversary::pair(*a, *b));
        }
        for (i, c) in self.topology.link_changes.iter().enumerate() {
            if !edges.contains(&crate::adversary::pair(c.a, c.b)) {
                return Err(invalid(format!("topology.link_changes[{i}]"), format!("no edge {}-{}", c.a, c.b)));
            }
        }
        for (label, id) in &self.topology.labels {
            known(id, format!("topology.labels.{label}"))?;
        }
        let mut pairs = BTreeSet::new();
        for (i, s) in self.security_associations.iter().enumerate() {
            let path = format!("security_associations[{i}]");
            known(&s.a, path.clone())?;
            known(&s.b, path.clone())?;
            if s.a == s.b {
                return Err(invalid(path, "an SA needs two distinct nodes"));
            }
            parse_key(&s.key).map_err(|e| invalid(format!("{path}.key"), e.to_string()))?;
            if !pairs.insert(crate::adversary::pair(s.a, s.b)) {
                return Err(invalid(path, "duplicate security association"));
            }
        }
        for (i, g) in self.groups.iter().enumerate() {
            parse_key(&g.key).map_err(|e| invalid(format!("groups[{i}].key"), e.to_string()))?;
            for m in &g.members {
                known(m, format!("groups[{i}].members"))?;
            }
        }
        for (i, d) in self.discoveries.iter().enumerate() {
            let path = format!("discoveries[{i}]");
            known(&d.source, path.clone())?;
            known(&d.target, path.clone())?;
            if !pairs.contains(&crate::adversary::pair(d.source, d.target)) {
                return Err(invalid(path, format!("no security association between {} and {}", d.source, d.target)));
            }
        }
        for (i, d) in self.data.iter().enumerate() {
            known(&d.source, format!("data[{i}]"))?;
            known(&d.target, format!("data[{i}]"))?;
        }
        for (i, r) in self.restarts.iter().enumerate() {
            known(&r.node, format!("restarts[{i}]"))?;
        }
        for (i, r) in self.seed_routes.iter().enumerate() {
            known(&r.node, format!("seed_routes[{i}]"))?;
            if r.route.first() != Some(&r.node) || r.route.len() < 2 {
                return Err(invalid(format!("seed_routes[{i}]"), "route must start at the node and name a target"));
            }
        }
        self.validate_attackers(registry, &nodes, &pairs)
    }

    fn validate_attackers(
        &self,
        registry: &AttackRegistry,
        nodes: &BTreeSet<NodeId>,
        pairs: &BTreeSet<(NodeId, NodeId)>,
    ) -> Result<(), ConfigError> {
        let mut attackers = BTreeSet::new();
        let mut tunnels = BTreeMap::new();
        for (i, a) in self.attackers.iter().enumerate() {
            let path = format!("attackers[{i}]");
            if !nodes.contains(&a.node) {
                return Err(invalid(path, format!("unknown node {}", a.node)));
            }
            if !attackers.insert(a.node) {
                return Err(invalid(path, format!("node {} already carries a profile", a.node)));
            }
            if !registry.contains(&a.kind) {
                return Err(invalid(format!("{path}.kind"), format!("unknown attack kind `{}`", a.kind)));
            }
            let setup = AttackSetup { node: a.node, seed: self.seed, params: &a.params, leaked_keys: BTreeMap::new() };
            let adv = registry.create(&a.kind, &setup).map_err(|e| invalid(format!("{path}.params"), e.to_string()))?;
            if a.kind == ColludeTunnel::KIND {
                tunnels.insert(a.node, adv.tunnel_peer().expect("tunnel profiles name a peer"));
            }
        }
        match (self.colluding_pair, tunnels.len()) {
            (None, 0) => {}
            (None, _) => return Err(invalid("colluding_pair", "tunnel profiles need a declared colluding pair")),
            (Some((a, b)), _) => {
                let ok = tunnels.len() == 2 && tunnels.get(&a) == Some(&b) && tunnels.get(&b) == Some(&a);
                if !ok {
                    return Err(invalid("colluding_pair", "both members need tunnel profiles naming each other"));
                }
            }
        }
        for (i, l) in self.leaked_keys.iter().enumerate() {
            let path = format!("leaked_keys[{i}]");
            if !attackers.contains(&l.to) {
                return Err(invalid(path, format!("{} is not an attacker", l.to)));
            }
            if !pairs.contains(&crate::adversary::pair(l.a, l.b)) {
                return Err(invalid(path, "no such security association"));
            }
        }
        Ok(())
    }
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<ScenarioConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Io { path: path.display().to_string(), msg: e.to_string() })?;
    ScenarioConfig::from_json(&text)
}
