use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use thiserror::Error;

use super::topology::{Bindings, Topology, TopologyError};
use super::trace::{Direction, Metrics, Trace, TraceRecord};
use super::{NetView, PersistentStore, SimTime};
use crate::adversary::{Adversary, Verdict};
use crate::codec::{decode_packet, encode_packet, NodeId, Packet};
use crate::crypto::mac_operations;
use crate::node::{Frame, Node, NodeCtx, Output, Payload, ProtocolParams, Role, Timer};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("node {0} is not in the topology")]
    UnknownNode(NodeId),
    #[error("node {0} cannot send to itself")]
    SelfSend(NodeId),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

pub struct SimNode {
    pub node: Node,
    pub adversary: Option<Box<dyn Adversary>>,
}

#[derive(Debug)]
enum Action {
    Start { node: NodeId },
    Deliver { to: NodeId, frame: Frame },
    LinkChange { a: NodeId, b: NodeId, up: bool },
    NodeRestart { node: NodeId },
    SchedulerTick { node: NodeId },
    Timer { node: NodeId, timer: Timer },
}

#[derive(Debug)]
struct SimEvent {
    time: SimTime,
    seq: u64,
    action: Action,
}

impl PartialEq for SimEvent {
    fn eq(&self, o: &Self) -> bool {
        (self.time, self.seq) == (o.time, o.seq)
    }
}
impl Eq for SimEvent {}
impl PartialOrd for SimEvent {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for SimEvent {
    // Reversed: BinaryHeap is a max-heap and we pop the earliest event.
    fn cmp(&self, o: &Self) -> Ordering {
        (o.time, o.seq).cmp(&(self.time, self.seq))
    }
}

pub struct Simulator {
    now: SimTime,
    seq: u64,
    queue: BinaryHeap<SimEvent>,
    topology: Topology,
    bindings: Bindings,
    tunnel: Option<(NodeId, NodeId)>,
    nodes: BTreeMap<NodeId, SimNode>,
    store: PersistentStore,
    trace: Trace,
    metrics: Metrics,
    params: ProtocolParams,
}

impl Simulator {
    pub fn new(topology: Topology, params: ProtocolParams) -> Self {
        let mut bindings = Bindings::default();
        for n in topology.nodes() {
            bindings.bind(n, n).expect("fresh bindings");
        }
        Simulator {
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            topology,
            bindings,
            tunnel: None,
            nodes: BTreeMap::new(),
            store: PersistentStore::default(),
            trace: Trace::default(),
            metrics: Metrics::default(),
            params,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn params(&self) -> &ProtocolParams {
        &self.params
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn bindings(&self) -> &Bindings {
        &self.bindings
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    pub fn into_parts(self) -> (Trace, Metrics, Topology, Bindings, BTreeMap<NodeId, SimNode>) {
        (self.trace, self.metrics, self.topology, self.bindings, self.nodes)
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(&id).map(|n| &n.node)
    }

    pub fn node_mut(&mut self, id: NodeId) -> Option<&mut Node> {
        self.nodes.get_mut(&id).map(|n| &mut n.node)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values().map(|n| &n.node)
    }

    /// Installs the state machine for a radio already in the topology. Any
    /// aliases the adversary claims are bound to that radio.
    pub fn add_node(&mut self, mut node: Node, adversary: Option<Box<dyn Adversary>>) -> Result<(), SimError> {
        let id = node.id;
        if !self.topology.contains(id) {
            return Err(SimError::UnknownNode(id));
        }
        if let Some(adv) = &adversary {
            for alias in adv.aliases() {
                self.bindings.bind(alias, id)?;
                node.add_alias(alias);
            }
            self.push(0, Action::Start { node: id });
        }
        self.nodes.insert(id, SimNode { node, adversary });
        Ok(())
    }

    pub fn set_tunnel(&mut self, a: NodeId, b: NodeId) {
        self.tunnel = Some((a, b));
    }

    fn push(&mut self, time: SimTime, action: Action) {
        self.seq += 1;
        self.queue.push(SimEvent { time, seq: self.seq, action });
    }

    pub fn schedule_timer(&mut self, at: SimTime, node: NodeId, timer: Timer) {
        self.push(at, Action::Timer { node, timer });
    }

    pub fn schedule_link_change(&mut self, at: SimTime, a: NodeId, b: NodeId, up: bool) -> Result<(), SimError> {
        if !self.topology.has_edge(a, b) {
            return Err(TopologyError::UnknownEdge(a, b).into());
        }
        self.push(at, Action::LinkChange { a, b, up });
        Ok(())
    }

    /// Applies a link state immediately, before the run starts.
    pub fn set_initial_link(&mut self, a: NodeId, b: NodeId, up: bool) -> Result<(), SimError> {
        Ok(self.topology.set_link(a, b, up, 0)?)
    }

    pub fn schedule_restart(&mut self, at: SimTime, node: NodeId) {
        self.push(at, Action::NodeRestart { node });
    }

    /// Delivers `payload` to every neighbor of `sender` over an up link, one
    /// latency later. Returns the number of deliveries scheduled.
    pub fn broadcast(&mut self, sender: NodeId, as_id: NodeId, payload: Payload) -> Result<usize, SimError> {
        if !self.topology.contains(sender) {
            return Err(SimError::UnknownNode(sender));
        }
        let Some(payload) = self.prepare(sender, as_id, payload, None) else { return Ok(0) };
        let at = self.now + self.params.latency_us;
        let receivers: Vec<NodeId> = self.topology.neighbors(sender).collect();
        for &to in &receivers {
            let frame = Frame {
                transmitter: sender,
                claimed: as_id,
                addressed_to: None,
                overheard: false,
                via_tunnel: false,
                payload: payload.clone(),
            };
            self.push(at, Action::Deliver { to, frame });
        }
        Ok(receivers.len())
    }

    /// Addressed delivery to the radio owning `receiver`. Other neighbors get
    /// promiscuous copies. Returns false on a channel drop.
    pub fn unicast_next_hop(
        &mut self,
        sender: NodeId,
        receiver: NodeId,
        as_id: NodeId,
        payload: Payload,
    ) -> Result<bool, SimError> {
        if !self.topology.contains(sender) {
            return Err(SimError::UnknownNode(sender));
        }
        let radio = self.bindings.radio_of(receiver);
        if radio == Some(sender) {
            return Err(SimError::SelfSend(sender));
        }
        let Some(radio) = radio.filter(|&r| self.topology.link_up(sender, r)) else {
            let rec = TraceRecord::new(self.now, sender, Direction::Tx, "channel_drop").peer(receiver);
            self.trace.push(rec);
            self.metrics.inc("channel_drop");
            return Ok(false);
        };
        let Some(payload) = self.prepare(sender, as_id, payload, Some(receiver)) else { return Ok(false) };
        let at = self.now + self.params.latency_us;
        let neighbors: Vec<NodeId> = self.topology.neighbors(sender).collect();
        for to in neighbors {
            let frame = Frame {
                transmitter: sender,
                claimed: as_id,
                addressed_to: Some(receiver),
                overheard: to != radio,
                via_tunnel: false,
                payload: payload.clone(),
            };
            self.push(at, Action::Deliver { to, frame });
        }
        Ok(true)
    }

    /// Common transmit path: id ownership, the traversal trail, the wire
    /// round trip and tx accounting.
    fn prepare(&mut self, sender: NodeId, as_id: NodeId, payload: Payload, to: Option<NodeId>) -> Option<Payload> {
        if !self.bindings.owns(sender, as_id) {
            let rec = TraceRecord::new(self.now, sender, Direction::Tx, "spoof_blocked").peer(as_id);
            self.trace.push(rec);
            self.metrics.inc("spoof_blocked");
            return None;
        }
        let mut payload = payload;
        if to.is_some() {
            // The channel attributes every hop to its real transmitter, so the
            // trail always ends with the sending id.
            if let Payload::Srp(Packet::Reply(r)) = &mut payload {
                if r.traversed_route.last() != Some(&as_id) {
                    r.traversed_route.push(as_id);
                }
            }
            if let Payload::Srp(Packet::Error(e)) = &mut payload {
                if e.traversed_route.last() != Some(&as_id) {
                    e.traversed_route.push(as_id);
                }
            }
        }
        let mut rec = TraceRecord::new(self.now, sender, Direction::Tx, "tx");
        if let Some(t) = to {
            rec = rec.peer(t);
        }
        let kind = match &payload {
            Payload::Srp(pkt) => {
                let bytes = match encode_packet(pkt) {
                    Ok(b) => b,
                    Err(e) => {
                        let rec = TraceRecord::new(self.now, sender, Direction::Tx, "encode_error").reason(&e.to_string());
                        self.trace.push(rec);
                        return None;
                    }
                };
                let decoded = decode_packet(&bytes).expect("encoder output decodes");
                debug_assert_eq!(&decoded, pkt);
                self.metrics.add("tx.bytes", bytes.len() as u64);
                rec = rec.packet(&decoded);
                if self.params.trace_packets {
                    rec.raw = Some(hex::encode(&bytes));
                }
                let kind = match pkt {
                    Packet::Request(_) => "request",
                    Packet::Reply(_) => "reply",
                    Packet::Error(_) => "error",
                };
                payload = Payload::Srp(decoded);
                kind
            }
            Payload::Data(_) => "data",
            Payload::Basis(_) => "basis",
        };
        if as_id != sender {
            rec = rec.reason(&format!("as {as_id}"));
        }
        self.trace.push(rec);
        self.metrics.inc(&format!("tx.{kind}"));
        self.metrics.inc(&format!("tx.node.{sender}"));
        Some(payload)
    }

    fn tunnel_send(&mut self, sender: NodeId, peer: NodeId, payload: Payload) {
        let view = NetView { topology: &self.topology, bindings: &self.bindings, tunnel: self.tunnel };
        let rec = TraceRecord::new(self.now, sender, Direction::Tx, "tunnel").peer(peer);
        if !view.tunnel_usable(sender, peer) {
            self.trace.push(rec.reason("Unreachable"));
            return;
        }
        let rec = match &payload {
            Payload::Srp(p) => rec.packet(p),
            _ => rec,
        };
        self.trace.push(rec);
        self.metrics.inc("tx.tunnel");
        let frame =
            Frame { transmitter: sender, claimed: sender, addressed_to: Some(peer), overheard: false, via_tunnel: true, payload };
        self.push(self.now + self.params.latency_us, Action::Deliver { to: peer, frame });
    }

    fn apply_outputs(&mut self, node: NodeId, outputs: Vec<Output>) {
        for o in outputs {
            match o {
                Output::Broadcast { as_id, payload } => {
                    self.broadcast(node, as_id, payload).expect("node is in topology");
                }
                Output::Unicast { next_hop, as_id, payload } => {
                    if let Err(SimError::SelfSend(_)) = self.unicast_next_hop(node, next_hop, as_id, payload) {
                        let rec = TraceRecord::new(self.now, node, Direction::Tx, "channel_drop").reason("SelfSend");
                        self.trace.push(rec);
                    }
                }
                Output::Tunnel { peer, payload } => self.tunnel_send(node, peer, payload),
                Output::Timer { at, timer } => self.push(at.max(self.now), Action::Timer { node, timer }),
                Output::Tick { at } => self.push(at.max(self.now), Action::SchedulerTick { node }),
            }
        }
    }

    /// Runs one handler against the node's state machine with a fresh
    /// context, then turns its outputs into events.
    fn dispatch(&mut self, id: NodeId, f: impl FnOnce(&mut SimNode, &mut NodeCtx) -> Role) {
        let Some(sim_node) = self.nodes.get_mut(&id) else { return };
        let before = mac_operations();
        let mut ctx = NodeCtx {
            now: self.now,
            me: id,
            params: &self.params,
            net: NetView { topology: &self.topology, bindings: &self.bindings, tunnel: self.tunnel },
            outputs: Vec::new(),
            trace: &mut self.trace,
            metrics: &mut self.metrics,
        };
        let role = f(sim_node, &mut ctx);
        let outputs = std::mem::take(&mut ctx.outputs);
        let ops = mac_operations() - before;
        self.metrics.add(&format!("mac_ops.{}", role.as_str()), ops);
        self.apply_outputs(id, outputs);
    }

    fn step(&mut self, ev: SimEvent) {
        self.now = ev.time;
        self.metrics.inc("events");
        match ev.action {
            Action::Start { node } => self.dispatch(node, |n, ctx| {
                if let Some(adv) = n.adversary.as_mut() {
                    adv.on_start(ctx, &mut n.node);
                }
                Role::Adversary
            }),
            Action::Deliver { to, frame } => {
                self.metrics.inc("deliveries");
                self.dispatch(to, |n, ctx| {
                    if let Some(adv) = n.adversary.as_mut() {
                        if adv.on_frame(ctx, &mut n.node, &frame) == Verdict::Consume {
                            return Role::Adversary;
                        }
                    }
                    n.node.handle_frame(ctx, &frame)
                })
            }
            Action::LinkChange { a, b, up } => {
                self.topology.set_link(a, b, up, self.now).expect("validated at schedule time");
                let rec = TraceRecord::new(self.now, a, Direction::Local, "link_change")
                    .peer(b)
                    .reason(if up { "Up" } else { "Down" });
                self.trace.push(rec);
            }
            Action::NodeRestart { node } => {
                if let Some(n) = self.nodes.get_mut(&node) {
                    n.node.save(&mut self.store);
                    n.node.restart(&self.store, &self.params);
                    self.trace.push(TraceRecord::new(self.now, node, Direction::Local, "restart"));
                }
            }
            Action::SchedulerTick { node } => self.dispatch(node, |n, ctx| n.node.on_tick(ctx)),
            Action::Timer { node, timer } => self.dispatch(node, |n, ctx| match (&timer, n.adversary.as_mut()) {
                (Timer::Attack(token), Some(adv)) => {
                    adv.on_timer(ctx, &mut n.node, *token);
                    Role::Adversary
                }
                _ => n.node.on_timer(ctx, &timer),
            }),
        }
    }

    /// Executes every event with time <= `end`, in (time, insertion) order.
    pub fn run_until(&mut self, end: SimTime) {
        while self.queue.peek().is_some_and(|e| e.time <= end) {
            let ev = self.queue.pop().expect("peeked");
            self.step(ev);
        }
        self.now = self.now.max(end);
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }
}
