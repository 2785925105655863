//! Deterministic discrete-event network simulator.

mod engine;
pub mod topology;
pub mod trace;

use std::collections::{BTreeMap, BTreeSet};

pub use engine::{SimError, SimNode, Simulator};
pub use topology::{ground_truth_check, Bindings, Edge, GroundTruth, Topology, TopologyError};
pub use trace::{Direction, Metrics, Trace, TraceRecord};

use crate::codec::NodeId;

/// Simulated microseconds.
pub type SimTime = u64;

pub const MS: SimTime = 1_000;
pub const SEC: SimTime = 1_000_000;

/// Read-only view of the network a node handler may consult.
#[derive(Clone, Copy)]
pub struct NetView<'a> {
    pub topology: &'a Topology,
    pub bindings: &'a Bindings,
    pub tunnel: Option<(NodeId, NodeId)>,
}

impl NetView<'_> {
    pub fn radio_of(&self, id: NodeId) -> Option<NodeId> {
        self.bindings.radio_of(id)
    }

    /// Whether `from` (a radio) has an up link to whichever radio owns `id`.
    pub fn link_to(&self, from: NodeId, id: NodeId) -> bool {
        self.radio_of(id).is_some_and(|r| r != from && self.topology.link_up(from, r))
    }

    pub fn tunnel_peer(&self, radio: NodeId) -> Option<NodeId> {
        match self.tunnel {
            Some((a, b)) if a == radio => Some(b),
            Some((a, b)) if b == radio => Some(a),
            _ => None,
        }
    }

    /// The covert channel needs some multi-hop path to carry it.
    pub fn tunnel_usable(&self, radio: NodeId, peer: NodeId) -> bool {
        self.tunnel_peer(radio) == Some(peer) && self.topology.reachable(radio, peer, &BTreeSet::new())
    }
}

/// Non-volatile SA counters, keyed by (owner, peer). Survives node restarts.
#[derive(Clone, Debug, Default)]
pub struct PersistentStore {
    counters: BTreeMap<(NodeId, NodeId), (u16, u16)>,
}

impl PersistentStore {
    pub fn put(&mut self, owner: NodeId, peer: NodeId, next_qseq: u16, smax: u16) {
        self.counters.insert((owner, peer), (next_qseq, smax));
    }

    pub fn get(&self, owner: NodeId, peer: NodeId) -> Option<(u16, u16)> {
        self.counters.get(&(owner, peer)).copied()
    }
}
