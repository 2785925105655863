use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use super::config::{ConfigError, ScenarioConfig};
use super::report::{DiscoveryOutcome, RouteOutcome, RunReport};
use crate::adversary::{AttackRegistry, AttackSetup};
use crate::codec::NodeId;
use crate::crypto::{parse_key, GroupKey, GroupKeyedInrt, SecurityAssociation};
use crate::node::{Node, Timer};
use crate::simnet::{ground_truth_check, Bindings, Simulator, Topology, Trace, MS};

/// Event kinds counted in the rejection histogram.
const REJECTION_EVENTS: &[&str] = &[
    "drop",
    "request_reject",
    "reply_reject",
    "reply_suppressed",
    "error_reject",
    "discovery_error",
    "spoof_blocked",
    "channel_drop",
];

/// Everything a run leaves behind.
#[derive(Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub trace: Trace,
    pub topology: Topology,
    pub bindings: Bindings,
    pub nodes: BTreeMap<NodeId, Node>,
}

fn setup_error(path: &str, e: impl std::fmt::Display) -> ConfigError {
    ConfigError::Validation { path: path.into(), msg: e.to_string() }
}

/// Wires the topology, keys, attackers and scripted events into a simulator
/// ready to run.
pub fn build_simulator(cfg: &ScenarioConfig, registry: &AttackRegistry) -> Result<Simulator, ConfigError> {
    cfg.validate_with(registry)?;
    let mut topology =
        Topology::from_edges(&cfg.topology.nodes, &cfg.topology.edges).map_err(|e| setup_error("topology", e))?;
    for (i, c) in cfg.topology.link_changes.iter().enumerate().filter(|(_, c)| c.at_ms == 0) {
        topology.set_link(c.a, c.b, c.up, 0).map_err(|e| setup_error(&format!("topology.link_changes[{i}]"), e))?;
    }
    let mut params = cfg.protocol.clone();
    params.resolve_windows(topology.diameter());
    let mut sim = Simulator::new(topology, params.clone());
    for (i, c) in cfg.topology.link_changes.iter().enumerate().filter(|(_, c)| c.at_ms > 0) {
        sim.schedule_link_change(c.at_ms * MS, c.a, c.b, c.up)
            .map_err(|e| setup_error(&format!("topology.link_changes[{i}]"), e))?;
    }

    let mut nodes: BTreeMap<NodeId, Node> =
        cfg.topology.nodes.iter().map(|&n| (n, Node::new(n, &params, cfg.seed))).collect();
    for s in &cfg.security_associations {
        let key = parse_key(&s.key).expect("key validated");
        nodes.get_mut(&s.a).expect("node validated").add_sa(SecurityAssociation::new(s.a, s.b, key, s.persistent));
        nodes.get_mut(&s.b).expect("node validated").add_sa(SecurityAssociation::new(s.b, s.a, key, s.persistent));
    }
    for g in &cfg.groups {
        let group = GroupKey {
            group_id: g.id.clone(),
            key: parse_key(&g.key).expect("key validated"),
            members: g.members.iter().copied().collect(),
        };
        let scheme = Arc::new(GroupKeyedInrt { alg: params.mac, group });
        for m in &g.members {
            nodes.get_mut(m).expect("node validated").set_inrt(scheme.clone());
        }
    }
    for r in &cfg.seed_routes {
        nodes.get_mut(&r.node).expect("node validated").seed_route(r.route.clone());
    }

    let mut adversaries = BTreeMap::new();
    for (i, a) in cfg.attackers.iter().enumerate() {
        let setup = AttackSetup { node: a.node, seed: cfg.seed, params: &a.params, leaked_keys: cfg.leaks_for(a.node) };
        let adv = registry.create(&a.kind, &setup).map_err(|e| setup_error(&format!("attackers[{i}]"), e))?;
        adversaries.insert(a.node, adv);
    }
    for (id, node) in nodes {
        sim.add_node(node, adversaries.remove(&id)).map_err(|e| setup_error("attackers", e))?;
    }
    if let Some((a, b)) = cfg.colluding_pair {
        sim.set_tunnel(a, b);
    }

    for d in &cfg.discoveries {
        for k in 0..u64::from(d.count) {
            let at = (d.at_ms + k * d.interval_ms) * MS;
            sim.schedule_timer(at, d.source, Timer::StartDiscovery { target: d.target, attempt: 0 });
        }
    }
    for d in &cfg.data {
        sim.schedule_timer(d.at_ms * MS, d.source, Timer::SendData { target: d.target });
    }
    for r in &cfg.restarts {
        sim.schedule_restart(r.at_ms * MS, r.node);
    }
    Ok(sim)
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunOutcome, ConfigError> {
    run_scenario_with(cfg, &AttackRegistry::builtin())
}

pub fn run_scenario_with(cfg: &ScenarioConfig, registry: &AttackRegistry) -> Result<RunOutcome, ConfigError> {
    let mut sim = build_simulator(cfg, registry)?;
    sim.run_until(cfg.end_time_ms * MS);
    let (trace, metrics, topology, bindings, sim_nodes) = sim.into_parts();
    let nodes: BTreeMap<NodeId, Node> = sim_nodes.into_iter().map(|(id, n)| (id, n.node)).collect();

    let attackers: BTreeSet<NodeId> = cfg.attackers.iter().map(|a| a.node).collect();
    let mut discoveries = Vec::new();
    for node in nodes.values() {
        let results = node.results();
        for res in results {
            let retried = results
                .iter()
                .any(|o| o.target == res.target && o.attempt == res.attempt + 1 && o.issued_at >= res.closed_at);
            let routes: Vec<RouteOutcome> = res
                .routes
                .iter()
                .map(|r| RouteOutcome {
                    nodes: r.nodes.clone(),
                    accepted_at: r.accepted_at,
                    replier: r.replier,
                    truth: ground_truth_check(&topology, &bindings, &r.nodes, r.accepted_at),
                })
                .collect();
            let partitioned = routes.is_empty() && !topology.reachable(res.source, res.target, &attackers);
            discoveries.push(DiscoveryOutcome {
                source: res.source,
                target: res.target,
                qseq: res.qseq,
                qid: res.qid,
                attempt: res.attempt,
                issued_at: res.issued_at,
                closed_at: res.closed_at,
                latency_us: res.latency(),
                routes,
                partitioned,
                retried,
            });
        }
    }
    discoveries.sort_by_key(|d| (d.issued_at, d.source, d.target));

    let mut packets_by_node = BTreeMap::new();
    for n in topology.nodes() {
        let c = metrics.get(&format!("tx.node.{n}"));
        if c > 0 {
            packets_by_node.insert(n, c);
        }
    }
    let mut rejections = BTreeMap::new();
    for r in trace.iter().filter(|r| REJECTION_EVENTS.contains(&r.event.as_str())) {
        let key = format!("{}/{}", r.event, r.reason.as_deref().unwrap_or("-"));
        *rejections.entry(key).or_insert(0) += 1;
    }

    let mut out = RunOutcome {
        report: RunReport {
            scenario: cfg.name.clone(),
            seed: cfg.seed,
            discoveries,
            packets_by_node,
            rejections,
            metrics,
            verdicts: Vec::new(),
        },
        trace,
        topology,
        bindings,
        nodes,
    };
    out.report.verdicts = cfg.expect.iter().map(|e| e.evaluate(&out)).collect();
    Ok(out)
}
