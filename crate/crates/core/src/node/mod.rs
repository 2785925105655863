//! Benign node state machine. One `Node` plays source, relay and target
//! roles; each role's logic lives in its own submodule and this file only
//! routes frames and timers to it.

pub mod destination;
pub mod intermediate;
pub mod params;
pub mod source;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{NodeId, Packet, RouteError, RouteReply, RouteRequest};
use crate::crypto::{InrtScheme, SecurityAssociation};
use crate::simnet::trace::{Direction, Metrics, Trace, TraceRecord};
use crate::simnet::{NetView, PersistentStore, SimTime};

pub use destination::{DestState, ReplySession, ReplySuppression, RequestRejection};
pub use intermediate::{
    DataOutcome, DataPacket, NeighborRateState, QueryKey, QueryTable, QueryTableEntry, QueuedRelay, RateTable,
    RelayDrop, RelayQueue, RelayState, ServiceOutcome,
};
pub use params::{ProtocolParams, ReplyMode, SchedulerParams};
pub use source::{
    AcceptedRoute, CachedRoute, DiscoveryError, DiscoveryResult, ErrorRejection, PendingQuery, ReplyRejection,
    RouteCache, RouteStatus, SourceState,
};

/// Route request of the unprotected basis protocol, relayed without any
/// security processing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BasisRequest {
    pub source: NodeId,
    pub target: NodeId,
    pub qid: u32,
    pub ttl: u8,
    pub accumulated_route: Vec<NodeId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Payload {
    Srp(Packet),
    Data(DataPacket),
    Basis(BasisRequest),
}

/// A delivered transmission as one receiving radio sees it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    /// Radio that physically sent the frame.
    pub transmitter: NodeId,
    /// Network id the transmitter sent under.
    pub claimed: NodeId,
    /// Intended next hop for unicasts.
    pub addressed_to: Option<NodeId>,
    /// Promiscuous copy of a unicast meant for someone else.
    pub overheard: bool,
    pub via_tunnel: bool,
    pub payload: Payload,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Timer {
    StartDiscovery { target: NodeId, attempt: u32 },
    ReplyWindow { target: NodeId, qseq: u16 },
    SendData { target: NodeId },
    Attack(u64),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Output {
    Broadcast { as_id: NodeId, payload: Payload },
    Unicast { next_hop: NodeId, as_id: NodeId, payload: Payload },
    Tunnel { peer: NodeId, payload: Payload },
    Timer { at: SimTime, timer: Timer },
    Tick { at: SimTime },
}

/// Which protocol role handled an event; cryptographic work is accounted
/// per role.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Idle,
    Source,
    Intermediate,
    Inrt,
    Destination,
    Adversary,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Idle => "idle",
            Role::Source => "source",
            Role::Intermediate => "intermediate",
            Role::Inrt => "inrt",
            Role::Destination => "destination",
            Role::Adversary => "adversary",
        }
    }
}

/// Everything a handler may observe or do while processing one event.
pub struct NodeCtx<'a> {
    pub now: SimTime,
    /// Radio id of the node being driven.
    pub me: NodeId,
    pub params: &'a ProtocolParams,
    pub net: NetView<'a>,
    pub outputs: Vec<Output>,
    pub trace: &'a mut Trace,
    pub metrics: &'a mut Metrics,
}

impl NodeCtx<'_> {
    /// Whether the radio owning `id` is currently a one-hop neighbor.
    pub fn is_neighbor(&self, id: NodeId) -> bool {
        self.net.link_to(self.me, id)
    }

    pub fn neighbor_count(&self) -> usize {
        self.net.topology.degree(self.me)
    }

    pub fn neighbors(&self) -> Vec<NodeId> {
        self.net.topology.neighbors(self.me).collect()
    }

    pub fn record(&self, direction: Direction, event: &str) -> TraceRecord {
        TraceRecord::new(self.now, self.me, direction, event)
    }

    pub fn log(&mut self, r: TraceRecord) {
        self.trace.push(r);
    }

    pub fn broadcast(&mut self, as_id: NodeId, payload: Payload) {
        self.outputs.push(Output::Broadcast { as_id, payload });
    }

    pub fn unicast(&mut self, next_hop: NodeId, as_id: NodeId, payload: Payload) {
        self.outputs.push(Output::Unicast { next_hop, as_id, payload });
    }

    pub fn tunnel(&mut self, peer: NodeId, payload: Payload) {
        self.outputs.push(Output::Tunnel { peer, payload });
    }

    pub fn timer(&mut self, at: SimTime, timer: Timer) {
        self.outputs.push(Output::Timer { at, timer });
    }
}

#[derive(Debug)]
pub struct Node {
    pub id: NodeId,
    aliases: BTreeSet<NodeId>,
    sas: BTreeMap<NodeId, SecurityAssociation>,
    inrt: Option<Arc<dyn InrtScheme>>,
    pub source: SourceState,
    pub relay: RelayState,
    pub dest: DestState,
    pub(crate) rng: ChaCha8Rng,
    data_seq: u32,
}

impl Node {
    pub fn new(id: NodeId, params: &ProtocolParams, seed: u64) -> Self {
        Node {
            id,
            aliases: [id].into(),
            sas: BTreeMap::new(),
            inrt: None,
            source: SourceState::default(),
            relay: RelayState::new(params),
            dest: DestState::default(),
            rng: ChaCha8Rng::seed_from_u64(seed ^ (u64::from(id.0) << 32 | u64::from(id.0))),
            data_seq: 0,
        }
    }

    pub fn add_sa(&mut self, sa: SecurityAssociation) {
        self.sas.insert(sa.peer_id, sa);
    }

    pub fn sa(&self, peer: NodeId) -> Option<&SecurityAssociation> {
        self.sas.get(&peer)
    }

    pub fn sas(&self) -> impl Iterator<Item = &SecurityAssociation> {
        self.sas.values()
    }

    pub fn set_inrt(&mut self, scheme: Arc<dyn InrtScheme>) {
        self.inrt = Some(scheme);
    }

    pub fn add_alias(&mut self, id: NodeId) {
        self.aliases.insert(id);
    }

    /// Own id plus any aliases.
    pub fn ids(&self) -> &BTreeSet<NodeId> {
        &self.aliases
    }

    pub fn owns(&self, id: NodeId) -> bool {
        self.aliases.contains(&id)
    }

    pub fn seed_route(&mut self, route: Vec<NodeId>) {
        if let Some(&t) = route.last() {
            self.relay.route_cache.insert(t, route);
        }
    }

    pub fn results(&self) -> &[DiscoveryResult] {
        &self.source.results
    }

    pub fn save(&self, store: &mut PersistentStore) {
        for sa in self.sas.values().filter(|s| s.persistent) {
            store.put(sa.self_id, sa.peer_id, sa.next_qseq, sa.smax);
        }
    }

    /// Loses all volatile state. Persistent SA counters come back from
    /// `store`; the rest restart from scratch.
    pub fn restart(&mut self, store: &PersistentStore, params: &ProtocolParams) {
        for sa in self.sas.values_mut() {
            match store.get(sa.self_id, sa.peer_id).filter(|_| sa.persistent) {
                Some((next_qseq, smax)) => {
                    sa.next_qseq = next_qseq;
                    sa.smax = smax;
                }
                None => {
                    sa.next_qseq = 1;
                    sa.smax = 0;
                }
            }
        }
        self.source.reset_volatile();
        self.relay.reset(params);
        self.dest = DestState::default();
    }

    pub fn handle_frame(&mut self, ctx: &mut NodeCtx, frame: &Frame) -> Role {
        if frame.overheard || frame.via_tunnel {
            return Role::Idle;
        }
        match &frame.payload {
            Payload::Srp(Packet::Request(req)) => self.on_request(ctx, req, frame),
            Payload::Srp(Packet::Reply(rep)) => self.on_reply(ctx, rep),
            Payload::Srp(Packet::Error(err)) => self.on_error(ctx, err),
            Payload::Data(pkt) => self.on_data(ctx, pkt),
            Payload::Basis(b) => self.on_basis(ctx, b),
        }
    }

    fn on_request(&mut self, ctx: &mut NodeCtx, req: &RouteRequest, frame: &Frame) -> Role {
        if self.owns(req.target) {
            self.on_request_as_target(ctx, req, frame.transmitter);
            return Role::Destination;
        }
        let params = ctx.params;
        let rate_key = match self.relay.admit(self.id, req, frame.transmitter, ctx.now, params) {
            Ok(k) => k,
            Err(d) => {
                let r = ctx.record(Direction::Rx, "drop").reason(d.as_str()).peer(frame.claimed);
                ctx.log(r.query(req.source, req.target, req.qseq(), req.qid()));
                return Role::Intermediate;
            }
        };
        let mut role = Role::Intermediate;
        if req.header.inrt().is_some() && self.inrt.is_some() {
            role = Role::Inrt;
            let key = self.sas.get(&req.source).map(|s| s.key);
            let reply = intermediate::try_inrt_reply(
                self.id,
                req,
                self.inrt.as_deref(),
                &self.relay.route_cache,
                key.as_ref(),
                params.mac,
            );
            if let Some(reply) = reply {
                let next = reply.ip_source_route[0];
                let rec = ctx.record(Direction::Tx, "inrt_reply").route(&reply.replied_route).peer(next);
                ctx.log(rec.query(req.source, req.target, req.qseq(), req.qid()));
                if ctx.is_neighbor(next) {
                    ctx.unicast(next, self.id, Payload::Srp(Packet::Reply(reply)));
                } else {
                    ctx.log(ctx.record(Direction::Local, "drop").reason(RelayDrop::NextHopUnreachable.as_str()));
                }
                return role;
            }
        }
        self.relay.enqueue(req.clone(), self.id, rate_key, ctx.now, params);
        let class = self.relay.rates.class_of(rate_key);
        let rec = ctx.record(Direction::Rx, "enqueue").peer(rate_key).reason(&format!("class{class}"));
        ctx.log(rec.query(req.source, req.target, req.qseq(), req.qid()));
        self.ensure_tick(ctx);
        role
    }

    fn ensure_tick(&mut self, ctx: &mut NodeCtx) {
        if self.relay.tick_pending.is_none() && !self.relay.queue.is_empty() {
            let at = intermediate::next_tick(ctx.now, ctx.params.tick_us.max(1));
            self.relay.tick_pending = Some(at);
            ctx.outputs.push(Output::Tick { at });
        }
    }

    pub fn on_tick(&mut self, ctx: &mut NodeCtx) -> Role {
        self.relay.tick_pending = None;
        let out = self.relay.scheduler_service(ctx.now, ctx.params);
        for e in out.expired {
            let r = &e.request;
            let rec = ctx.record(Direction::Local, "drop").reason(RelayDrop::QueueExpired.as_str()).peer(e.neighbor);
            ctx.log(rec.query(r.source, r.target, r.qseq(), r.qid()));
        }
        for e in out.relayed {
            let r = &e.request;
            let rec = ctx.record(Direction::Tx, "relay").peer(e.neighbor).route(&r.accumulated_route);
            ctx.log(rec.query(r.source, r.target, r.qseq(), r.qid()));
            ctx.broadcast(self.id, Payload::Srp(Packet::Request(e.request)));
        }
        self.ensure_tick(ctx);
        Role::Intermediate
    }

    fn on_request_as_target(&mut self, ctx: &mut NodeCtx, req: &RouteRequest, last_hop: NodeId) {
        let params = ctx.params;
        let q = |r: TraceRecord| r.query(req.source, req.target, req.qseq(), req.qid());
        let verdict =
            self.dest.validate_request(req, self.sas.get_mut(&req.source), params.mac, ctx.now, params.dest_window());
        if let Err(why) = verdict {
            ctx.log(q(ctx.record(Direction::Rx, "request_reject").reason(why.as_str()).peer(last_hop)));
            return;
        }
        ctx.log(q(ctx.record(Direction::Rx, "request_valid").peer(last_hop)));
        let sa = self.sas.get(&req.source).expect("validated");
        let neighbors = ctx.neighbor_count();
        match self.dest.generate_reply(self.id, req, last_hop, neighbors, sa, params.reply_mode, params.mac, ctx.now) {
            Ok(reply) => {
                let next = reply.ip_source_route[0];
                let mut route = vec![req.source];
                route.extend_from_slice(&req.accumulated_route);
                route.push(self.id);
                ctx.log(q(ctx.record(Direction::Tx, "reply_sent").route(&route).peer(next)));
                if ctx.is_neighbor(next) {
                    ctx.unicast(next, self.id, Payload::Srp(Packet::Reply(reply)));
                } else {
                    let r = ctx.record(Direction::Local, "drop").reason(RelayDrop::NextHopUnreachable.as_str());
                    ctx.log(q(r.peer(next)));
                }
            }
            Err(s) => ctx.log(q(ctx.record(Direction::Local, "reply_suppressed").reason(s.as_str()).peer(last_hop))),
        }
    }

    fn on_reply(&mut self, ctx: &mut NodeCtx, rep: &RouteReply) -> Role {
        let q = |r: TraceRecord| r.query(rep.source, rep.target, rep.header.qseq, rep.header.qid);
        if rep.source == self.id && rep.ip_source_route.len() == 1 && rep.ip_source_route[0] == self.id {
            let pending = self.source.pending.get(&rep.target);
            let full = pending.is_some_and(|p| p.accepted_routes.len() >= ctx.params.max_routes);
            let sas = &self.sas;
            let verdict = if full {
                Err(ReplyRejection::RouteLimit)
            } else {
                source::validate_reply(self.id, rep, pending, ctx.params.mac, |n| sas.get(&n).map(|s| s.key))
            };
            match verdict {
                Ok(v) => {
                    let rec = ctx.record(Direction::Rx, "reply_accept").route(&v.route).peer(v.replier);
                    ctx.log(q(rec));
                    self.source.accept(rep.target, v.route, v.replier, ctx.now);
                }
                Err(why) => {
                    let mut rec = ctx.record(Direction::Rx, "reply_reject").reason(why.as_str());
                    if !rep.replied_route.is_empty() {
                        rec = rec.route(&rep.replied_route);
                    }
                    ctx.log(q(rec));
                }
            }
            return Role::Source;
        }
        let net = &ctx.net;
        let me = ctx.me;
        match intermediate::relay_reply(&self.aliases, rep, |n| net.link_to(me, n)) {
            Ok((as_id, next, fwd)) => {
                ctx.log(q(ctx.record(Direction::Tx, "reply_forward").peer(next)));
                ctx.unicast(next, as_id, Payload::Srp(Packet::Reply(fwd)));
            }
            Err(d) => {
                let next = rep.ip_source_route.get(1).copied().unwrap_or(NodeId::UNASSIGNED);
                ctx.log(q(ctx.record(Direction::Rx, "drop").reason(d.as_str()).peer(next)));
            }
        }
        Role::Intermediate
    }

    fn on_error(&mut self, ctx: &mut NodeCtx, err: &RouteError) -> Role {
        let link = |r: TraceRecord| r.route(&err.reported_route).peer(err.reporter);
        if err.ip_source_route.len() == 1 && err.ip_source_route[0] == self.id {
            match source::validate_route_error(self.id, err, &self.source.cache) {
                Ok(()) => {
                    self.source.cache.mark_broken(&err.reported_route);
                    ctx.log(link(ctx.record(Direction::Rx, "error_accept")));
                }
                Err(why) => ctx.log(link(ctx.record(Direction::Rx, "error_reject").reason(why.as_str()))),
            }
            return Role::Source;
        }
        let net = &ctx.net;
        let me = ctx.me;
        match intermediate::relay_error(&self.aliases, err, |n| net.link_to(me, n)) {
            Ok((as_id, next, fwd)) => {
                ctx.log(link(ctx.record(Direction::Tx, "error_forward")));
                ctx.unicast(next, as_id, Payload::Srp(Packet::Error(fwd)));
            }
            Err(d) => ctx.log(link(ctx.record(Direction::Rx, "drop").reason(d.as_str()))),
        }
        Role::Intermediate
    }

    fn on_data(&mut self, ctx: &mut NodeCtx, pkt: &DataPacket) -> Role {
        let net = &ctx.net;
        let me = ctx.me;
        let outcome = intermediate::forward_data(&self.aliases, pkt, |n| net.link_to(me, n));
        self.apply_data(ctx, pkt, outcome);
        Role::Intermediate
    }

    fn apply_data(&mut self, ctx: &mut NodeCtx, pkt: &DataPacket, outcome: Result<DataOutcome, RelayDrop>) {
        let rec = |ctx: &NodeCtx, d, e| ctx.record(d, e).route(&pkt.route);
        match outcome {
            Ok(DataOutcome::Delivered) => ctx.log(rec(ctx, Direction::Rx, "data_delivered").peer(pkt.source)),
            Ok(DataOutcome::Forward { as_id, next_hop, packet }) => {
                let ev = if pkt.at == 0 { "data_send" } else { "data_forward" };
                ctx.log(rec(ctx, Direction::Tx, ev).peer(next_hop));
                ctx.unicast(next_hop, as_id, Payload::Data(packet));
            }
            Ok(DataOutcome::Broken { as_id, next_hop, error }) => {
                let (a, b) = error.broken_link;
                if pkt.at == 0 {
                    // The break is adjacent to the source itself.
                    self.source.cache.mark_broken(&pkt.route);
                    ctx.log(rec(ctx, Direction::Local, "link_break").peer(b));
                    return;
                }
                ctx.log(rec(ctx, Direction::Tx, "route_error_sent").peer(b).reason(&format!("{a}-{b}")));
                match next_hop.filter(|&n| ctx.is_neighbor(n)) {
                    Some(n) => ctx.unicast(n, as_id, Payload::Srp(Packet::Error(error))),
                    None => ctx.log(ctx.record(Direction::Local, "drop").reason(RelayDrop::NextHopUnreachable.as_str())),
                }
            }
            Err(d) => ctx.log(rec(ctx, Direction::Rx, "drop").reason(d.as_str())),
        }
    }

    fn on_basis(&mut self, ctx: &mut NodeCtx, b: &BasisRequest) -> Role {
        let base = |ctx: &NodeCtx, e| ctx.record(Direction::Rx, e).reason("NoSrpHeader").peer(b.source);
        if self.owns(b.target) || b.source == self.id {
            ctx.log(base(ctx, "drop"));
        } else if !self.relay.basis_seen.insert((b.source, b.target, b.qid)) {
            ctx.log(ctx.record(Direction::Rx, "drop").reason(RelayDrop::Duplicate.as_str()).peer(b.source));
        } else if b.ttl == 0 {
            ctx.log(ctx.record(Direction::Rx, "drop").reason(RelayDrop::TtlExpired.as_str()).peer(b.source));
        } else {
            let mut fwd = b.clone();
            fwd.ttl -= 1;
            fwd.accumulated_route.push(self.id);
            ctx.log(base(ctx, "basis_relay").route(&fwd.accumulated_route));
            ctx.broadcast(self.id, Payload::Basis(fwd));
        }
        Role::Intermediate
    }

    pub fn on_timer(&mut self, ctx: &mut NodeCtx, timer: &Timer) -> Role {
        match *timer {
            Timer::StartDiscovery { target, attempt } => self.start_discovery(ctx, target, attempt),
            Timer::ReplyWindow { target, qseq } => {
                if let Some(res) = self.source.on_reply_window_close(self.id, target, qseq, ctx.now) {
                    let verdict = if res.routes.is_empty() { "Empty" } else { "Succeeded" };
                    let rec = ctx.record(Direction::Local, "discovery_end").reason(verdict);
                    ctx.log(rec.query(self.id, target, res.qseq, res.qid));
                    let p = ctx.params;
                    if res.routes.is_empty() && res.attempt < p.max_retries {
                        let at = ctx.now + source::backoff_delay(p.backoff_base_us, res.attempt);
                        ctx.timer(at, Timer::StartDiscovery { target, attempt: res.attempt + 1 });
                    }
                }
            }
            Timer::SendData { target } => self.send_data(ctx, target),
            Timer::Attack(_) => {}
        }
        Role::Source
    }

    fn start_discovery(&mut self, ctx: &mut NodeCtx, target: NodeId, attempt: u32) {
        let params = ctx.params;
        let inrt = if params.request_inrt { self.inrt.as_deref() } else { None };
        let sa = self.sas.get_mut(&target);
        match self.source.initiate_discovery(self.id, target, sa, inrt, params, &mut self.rng, ctx.now, attempt) {
            Ok(req) => {
                let rec = ctx.record(Direction::Tx, "discovery_start").reason(&format!("attempt{attempt}"));
                ctx.log(rec.query(self.id, target, req.qseq(), req.qid()));
                let deadline = self.source.pending[&target].deadline;
                ctx.timer(deadline, Timer::ReplyWindow { target, qseq: req.qseq() });
                ctx.broadcast(self.id, Payload::Srp(Packet::Request(req)));
            }
            Err(e) => ctx.log(ctx.record(Direction::Local, "discovery_error").reason(e.code()).peer(target)),
        }
    }

    fn send_data(&mut self, ctx: &mut NodeCtx, target: NodeId) {
        let Some(best) = self.source.cache.best(target) else {
            ctx.log(ctx.record(Direction::Local, "data_send").reason("NoRoute").peer(target));
            return;
        };
        let pkt = DataPacket { source: self.id, target, seq: self.data_seq, route: best.nodes.clone(), at: 0 };
        self.data_seq += 1;
        let net = &ctx.net;
        let me = ctx.me;
        let outcome = intermediate::forward_data(&self.aliases, &pkt, |n| net.link_to(me, n));
        self.apply_data(ctx, &pkt, outcome);
    }
}
