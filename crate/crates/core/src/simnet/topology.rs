use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::SimTime;
use crate::codec::NodeId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("node {0} is not in the topology")]
    UnknownNode(NodeId),
    #[error("no edge between {0} and {1}")]
    UnknownEdge(NodeId, NodeId),
    #[error("self loop on {0}")]
    SelfLoop(NodeId),
    #[error("duplicate node {0}")]
    DuplicateNode(NodeId),
    #[error("id {0} is already bound to radio {1}")]
    AlreadyBound(NodeId, NodeId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge(NodeId, NodeId);

impl Edge {
    pub fn new(a: NodeId, b: NodeId) -> Self {
        if a <= b {
            Edge(a, b)
        } else {
            Edge(b, a)
        }
    }

    pub fn ends(self) -> (NodeId, NodeId) {
        (self.0, self.1)
    }
}

/// Undirected link graph. Every edge keeps its full up/down history so
/// ground-truth questions can be asked about any past instant.
#[derive(Clone, Debug, Default)]
pub struct Topology {
    nodes: BTreeSet<NodeId>,
    adjacency: BTreeMap<NodeId, BTreeSet<NodeId>>,
    /// (time, up) transitions per edge, time-ordered. The first entry is the
    /// initial state at time 0.
    history: BTreeMap<Edge, Vec<(SimTime, bool)>>,
}

impl Topology {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, n: NodeId) -> Result<(), TopologyError> {
        if !self.nodes.insert(n) {
            return Err(TopologyError::DuplicateNode(n));
        }
        self.adjacency.entry(n).or_default();
        Ok(())
    }

    pub fn add_edge(&mut self, a: NodeId, b: NodeId) -> Result<(), TopologyError> {
        if a == b {
            return Err(TopologyError::SelfLoop(a));
        }
        for n in [a, b] {
            if !self.nodes.contains(&n) {
                return Err(TopologyError::UnknownNode(n));
            }
        }
        self.adjacency.entry(a).or_default().insert(b);
        self.adjacency.entry(b).or_default().insert(a);
        self.history.entry(Edge::new(a, b)).or_insert_with(|| vec![(0, true)]);
        Ok(())
    }

    pub fn from_edges(nodes: &[NodeId], edges: &[(NodeId, NodeId)]) -> Result<Self, TopologyError> {
        let mut t = Topology::new();
        for &n in nodes {
            t.add_node(n)?;
        }
        for &(a, b) in edges {
            t.add_edge(a, b)?;
        }
        Ok(t)
    }

    pub fn contains(&self, n: NodeId) -> bool {
        self.nodes.contains(&n)
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().copied()
    }

    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        self.history.keys().copied()
    }

    pub fn has_edge(&self, a: NodeId, b: NodeId) -> bool {
        self.history.contains_key(&Edge::new(a, b))
    }

    pub fn set_link(&mut self, a: NodeId, b: NodeId, up: bool, at: SimTime) -> Result<(), TopologyError> {
        let h = self.history.get_mut(&Edge::new(a, b)).ok_or(TopologyError::UnknownEdge(a, b))?;
        match h.last_mut() {
            Some(last) if last.0 == at => last.1 = up,
            _ => h.push((at, up)),
        }
        Ok(())
    }

    /// Current state (latest transition).
    pub fn link_up(&self, a: NodeId, b: NodeId) -> bool {
        self.history
            .get(&Edge::new(a, b))
            .and_then(|h| h.last())
            .is_some_and(|&(_, up)| up)
    }

    pub fn link_up_at(&self, a: NodeId, b: NodeId, at: SimTime) -> bool {
        let Some(h) = self.history.get(&Edge::new(a, b)) else {
            return false;
        };
        h.iter().take_while(|(t, _)| *t <= at).last().is_some_and(|&(_, up)| up)
    }

    /// Neighbors over currently-up links, ascending.
    pub fn neighbors(&self, n: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.adjacency
            .get(&n)
            .into_iter()
            .flatten()
            .copied()
            .filter(move |&m| self.link_up(n, m))
    }

    pub fn degree(&self, n: NodeId) -> usize {
        self.neighbors(n).count()
    }

    /// Shortest hop distances from `from` over up links, skipping `avoid`.
    pub fn hop_distances(&self, from: NodeId, avoid: &BTreeSet<NodeId>) -> BTreeMap<NodeId, usize> {
        let mut dist = BTreeMap::new();
        if !self.contains(from) || avoid.contains(&from) {
            return dist;
        }
        dist.insert(from, 0);
        let mut q = VecDeque::from([from]);
        while let Some(u) = q.pop_front() {
            let d = dist[&u];
            for v in self.neighbors(u) {
                if !avoid.contains(&v) && !dist.contains_key(&v) {
                    dist.insert(v, d + 1);
                    q.push_back(v);
                }
            }
        }
        dist
    }

    pub fn reachable(&self, from: NodeId, to: NodeId, avoid: &BTreeSet<NodeId>) -> bool {
        self.hop_distances(from, avoid).contains_key(&to)
    }

    /// Largest finite shortest-path distance over up links.
    pub fn diameter(&self) -> usize {
        let none = BTreeSet::new();
        self.nodes
            .iter()
            .filter_map(|&n| self.hop_distances(n, &none).values().copied().max())
            .max()
            .unwrap_or(0)
    }

    /// Every simple path from `from` to `to` over up links. Exponential; meant
    /// for small test graphs.
    pub fn simple_paths(&self, from: NodeId, to: NodeId) -> Vec<Vec<NodeId>> {
        fn walk(t: &Topology, path: &mut Vec<NodeId>, to: NodeId, out: &mut Vec<Vec<NodeId>>) {
            let u = *path.last().expect("non-empty");
            if u == to {
                out.push(path.clone());
                return;
            }
            let next: Vec<_> = t.neighbors(u).filter(|v| !path.contains(v)).collect();
            for v in next {
                path.push(v);
                walk(t, path, to, out);
                path.pop();
            }
        }
        let mut out = Vec::new();
        if self.contains(from) {
            walk(self, &mut vec![from], to, &mut out);
        }
        out
    }
}

/// Maps every claimed network id to the radio that owns it. Each radio owns
/// its own id; adversaries may register extra aliases, but no id can be bound
/// to two radios.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    owner: BTreeMap<NodeId, NodeId>,
}

impl Bindings {
    pub fn bind(&mut self, id: NodeId, radio: NodeId) -> Result<(), TopologyError> {
        match self.owner.get(&id) {
            Some(&r) if r != radio => Err(TopologyError::AlreadyBound(id, r)),
            _ => {
                self.owner.insert(id, radio);
                Ok(())
            }
        }
    }

    pub fn radio_of(&self, id: NodeId) -> Option<NodeId> {
        self.owner.get(&id).copied()
    }

    pub fn owns(&self, radio: NodeId, id: NodeId) -> bool {
        self.radio_of(id) == Some(radio)
    }

    pub fn ids_of(&self, radio: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.owner.iter().filter(move |(_, &r)| r == radio).map(|(&id, _)| id)
    }
}

/// Ground-truth classification of a claimed route.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "verdict")]
pub enum GroundTruth {
    Genuine,
    False { link: (NodeId, NodeId) },
}

impl GroundTruth {
    pub fn is_genuine(self) -> bool {
        matches!(self, GroundTruth::Genuine)
    }
}

/// Checks every hop of `route` against the link state at `at`, resolving
/// claimed ids to the radios that own them.
pub fn ground_truth_check(topology: &Topology, bindings: &Bindings, route: &[NodeId], at: SimTime) -> GroundTruth {
    for pair in route.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let ok = match (bindings.radio_of(a), bindings.radio_of(b)) {
            (Some(ra), Some(rb)) => ra != rb && topology.link_up_at(ra, rb, at),
            _ => false,
        };
        if !ok {
            return GroundTruth::False { link: (a, b) };
        }
    }
    GroundTruth::Genuine
}

#[cfg(test)]
mod tests {
    use super::*;

    fn n(v: u32) -> NodeId {
        NodeId(v)
    }

    fn line() -> Topology {
        Topology::from_edges(&[n(1), n(2), n(3)], &[(n(1), n(2)), (n(2), n(3))]).unwrap()
    }

    #[test]
    fn edges_are_bidirectional() {
        let t = line();
        assert!(t.link_up(n(1), n(2)) && t.link_up(n(2), n(1)));
        assert_eq!(t.neighbors(n(2)).collect::<Vec<_>>(), vec![n(1), n(3)]);
    }

    #[test]
    fn link_history() {
        let mut t = line();
        t.set_link(n(1), n(2), false, 500).unwrap();
        assert!(t.link_up_at(n(2), n(1), 499));
        assert!(!t.link_up_at(n(2), n(1), 500));
        assert!(!t.link_up(n(1), n(2)));
        assert_eq!(t.neighbors(n(2)).collect::<Vec<_>>(), vec![n(3)]);
        assert!(t.set_link(n(1), n(3), true, 0).is_err());
    }

    #[test]
    fn diameter_and_reachability() {
        let t = line();
        assert_eq!(t.diameter(), 2);
        assert!(t.reachable(n(1), n(3), &BTreeSet::new()));
        assert!(!t.reachable(n(1), n(3), &[n(2)].into()));
    }

    #[test]
    fn ground_truth_resolves_aliases() {
        let t = line();
        let mut b = Bindings::default();
        for i in 1..=3 {
            b.bind(n(i), n(i)).unwrap();
        }
        b.bind(n(150), n(2)).unwrap();
        assert_eq!(b.bind(n(150), n(3)), Err(TopologyError::AlreadyBound(n(150), n(2))));
        assert!(ground_truth_check(&t, &b, &[n(1), n(150), n(3)], 0).is_genuine());
        assert_eq!(
            ground_truth_check(&t, &b, &[n(1), n(3)], 0),
            GroundTruth::False { link: (n(1), n(3)) }
        );
        assert_eq!(
            ground_truth_check(&t, &b, &[n(1), n(99)], 0),
            GroundTruth::False { link: (n(1), n(99)) }
        );
        assert!(ground_truth_check(&t, &b, &[n(1)], 0).is_genuine());
        assert!(!ground_truth_check(&t, &b, &[n(2), n(150)], 0).is_genuine());
    }

    #[test]
    fn simple_paths_enumerates() {
        let mut t = line();
        t.add_edge(n(1), n(3)).unwrap();
        let mut paths = t.simple_paths(n(1), n(3));
        paths.sort();
        assert_eq!(paths, vec![vec![n(1), n(2), n(3)], vec![n(1), n(3)]]);
    }
}
