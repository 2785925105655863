use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use super::{garbage_mac, log_attack, random_id, relayed, Adversary, AttackError, AttackSetup, Verdict};
use crate::codec::{NodeId, Packet, PacketType, RequestHeader, RouteError, RouteReply, RouteRequest, SrpHeader};
use crate::crypto::{self, Key, ReplyCoverage};
use crate::node::{Frame, Node, NodeCtx, Payload, QueryKey, Timer};
use crate::simnet::{SimTime, MS};

fn request_of(frame: &Frame) -> Option<&RouteRequest> {
    match &frame.payload {
        Payload::Srp(Packet::Request(r)) => Some(r),
        _ => None,
    }
}

fn reply_of(frame: &Frame) -> Option<&RouteReply> {
    match &frame.payload {
        Payload::Srp(Packet::Reply(r)) => Some(r),
        _ => None,
    }
}

/// A request this attacker could plausibly relay: heard directly, not its
/// own and not addressed to it.
fn relayable<'a>(frame: &'a Frame, node: &Node) -> Option<&'a RouteRequest> {
    let req = request_of(frame)?;
    (!frame.overheard && !frame.via_tunnel && !node.owns(req.source) && !node.owns(req.target)).then_some(req)
}

fn has_repeats(route: &[NodeId]) -> bool {
    let mut seen = BTreeSet::new();
    !route.iter().all(|n| seen.insert(*n))
}

fn contains_link(route: &[NodeId], (a, b): (NodeId, NodeId)) -> bool {
    route.windows(2).any(|w| w[0] == a && w[1] == b)
}

fn bad_params(kind: &str, msg: impl Into<String>) -> AttackError {
    AttackError::BadParams { kind: kind.to_owned(), msg: msg.into() }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FabricateReplyParams {
    /// Also relay the request normally after answering it.
    pub relay: bool,
}

impl Default for FabricateReplyParams {
    fn default() -> Self {
        FabricateReplyParams { relay: true }
    }
}

/// Answers every request it hears with a short route through itself.
#[derive(Debug)]
pub struct FabricateReply {
    cfg: FabricateReplyParams,
    seen: BTreeSet<QueryKey>,
    leaked: BTreeMap<(NodeId, NodeId), Key>,
    rng: ChaCha8Rng,
}

impl FabricateReply {
    pub const KIND: &'static str = "fabricate_reply";

    pub fn create(s: &AttackSetup) -> Result<Box<dyn Adversary>, AttackError> {
        Ok(Box::new(FabricateReply {
            cfg: s.parse(Self::KIND)?,
            seen: BTreeSet::new(),
            leaked: s.leaked_keys.clone(),
            rng: s.rng(),
        }))
    }
}

impl Adversary for FabricateReply {
    fn kind(&self) -> &'static str {
        Self::KIND
    }

    fn on_frame(&mut self, ctx: &mut NodeCtx, node: &mut Node, frame: &Frame) -> Verdict {
        let Some(req) = relayable(frame, node) else { return Verdict::Pass };
        if !self.seen.insert(QueryKey::of(req)) {
            return Verdict::Pass;
        }
        let me = node.id;
        let mut route = vec![req.source];
        route.extend_from_slice(&req.accumulated_route);
        route.extend([me, req.target]);
        if has_repeats(&route) {
            return Verdict::Pass;
        }
        let (qseq, qid) = (req.qseq(), req.qid());
        let mut header = SrpHeader::new(PacketType::Reply, qseq, qid);
        header.mac = match self.leaked.get(&super::pair(req.source, req.target)) {
            Some(k) => {
                crypto::reply_mac(ctx.params.mac, k, req.source, req.target, qseq, qid, ReplyCoverage::Payload(&route))
            }
            None => garbage_mac(&mut self.rng),
        };
        let mut ip: Vec<NodeId> = req.accumulated_route.iter().rev().copied().collect();
        ip.push(req.source);
        let next = ip[0];
        let reply = RouteReply {
            header,
            source: req.source,
            target: req.target,
            replied_route: route,
            ip_source_route: ip,
            // Pretend the target sent it.
            traversed_route: vec![req.target],
        };
        log_attack(ctx, "FabricateReply");
        if ctx.is_neighbor(next) {
            ctx.unicast(next, me, Payload::Srp(Packet::Reply(reply)));
        }
        if self.cfg.relay {
            Verdict::Pass
        } else {
            Verdict::Consume
        }
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DropRequestsParams {
    /// Upstream ids whose requests are still handled normally.
    pub except_from: Vec<NodeId>,
    /// Drop nothing at all; a control setting.
    pub none: bool,
}

#[derive(Debug)]
pub struct DropRequests {
    cfg: DropRequestsParams,
    logged: BTreeSet<QueryKey>,
}

impl DropRequests {
    pub const KIND: &'static str = "drop_requests";

    pub fn create(s: &AttackSetup) -> Result<Box<dyn Adversary>, AttackError> {
        Ok(Box::new(DropRequests { cfg: s.parse(Self::KIND)?, logged: BTreeSet::new() }))
    }
}

impl Adversary for DropRequests {
    fn kind(&self) -> &'static str {
        Self::KIND
    }

    fn on_frame(&mut self, ctx: &mut NodeCtx, node: &mut Node, frame: &Frame) -> Verdict {
        let Some(req) = relayable(frame, node) else { return Verdict::Pass };
        if self.cfg.none || self.cfg.except_from.contains(&frame.claimed) {
            return Verdict::Pass;
        }
        if self.logged.insert(QueryKey::of(req)) {
            log_attack(ctx, "DropRequest");
        }
        Verdict::Consume
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TamperReplyParams {
    /// Ids substituted for the genuine suffix between this node and the target.
    pub invented: Vec<NodeId>,
    /// Stop tampering after this many replies.
    pub max_tampers: Option<usize>,
    /// Leave the payload alone and forge only the traversal trail.
    pub reroute: bool,
}

impl Default for TamperReplyParams {
    fn default() -> Self {
        TamperReplyParams { invented: vec![NodeId(190)], max_tampers: None, reroute: false }
    }
}

#[derive(Debug)]
pub struct TamperReply {
    cfg: TamperReplyParams,
    done: usize,
}

impl TamperReply {
    pub const KIND: &'static str = "tamper_reply";

    pub fn create(s: &AttackSetup) -> Result<Box<dyn Adversary>, AttackError> {
        Ok(Box::new(TamperReply { cfg: s.parse(Self::KIND)?, done: 0 }))
    }
}

impl Adversary for TamperReply {
    fn kind(&self) -> &'static str {
        Self::KIND
    }

    fn on_frame(&mut self, ctx: &mut NodeCtx, node: &mut Node, frame: &Frame) -> Verdict {
        let Some(rep) = reply_of(frame) else { return Verdict::Pass };
        if frame.overheard || self.cfg.max_tampers.is_some_and(|m| self.done >= m) {
            return Verdict::Pass;
        }
        let Some(&head) = rep.ip_source_route.first().filter(|h| node.owns(**h)) else { return Verdict::Pass };
        let Some(pos) = rep.replied_route.iter().position(|&n| n == head) else { return Verdict::Pass };
        if rep.ip_source_route.len() < 2 {
            return Verdict::Pass;
        }
        let mut t = rep.clone();
        t.ip_source_route.remove(0);
        if self.cfg.reroute {
            t.traversed_route = std::iter::once(rep.target).chain(self.cfg.invented.iter().rev().copied()).collect();
        } else {
            let mut route = rep.replied_route[..=pos].to_vec();
            route.extend_from_slice(&self.cfg.invented);
            route.push(rep.target);
            t.traversed_route = route[pos + 1..].iter().rev().copied().collect();
            t.replied_route = route;
        }
        let next = t.ip_source_route[0];
        if !ctx.is_neighbor(next) {
            return Verdict::Pass;
        }
        self.done += 1;
        log_attack(ctx, "TamperReply");
        ctx.unicast(next, head, Payload::Srp(Packet::Reply(t)));
        Verdict::Consume
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptParams {
    /// Splice position in the accumulated route.
    pub at: usize,
    /// Entries removed at `at`.
    pub remove: usize,
    /// Entries inserted at `at`.
    pub insert: Vec<NodeId>,
}

/// Rewrites the accumulated route of every request before relaying it.
#[derive(Debug)]
pub struct CorruptAccumulatedRoute {
    cfg: CorruptParams,
    seen: BTreeSet<QueryKey>,
}

impl CorruptAccumulatedRoute {
    pub const KIND: &'static str = "corrupt_accumulated_route";

    pub fn create(s: &AttackSetup) -> Result<Box<dyn Adversary>, AttackError> {
        Ok(Box::new(CorruptAccumulatedRoute { cfg: s.parse(Self::KIND)?, seen: BTreeSet::new() }))
    }

    pub fn corrupt(&self, acc: &[NodeId]) -> Vec<NodeId> {
        let at = self.cfg.at.min(acc.len());
        let end = (at + self.cfg.remove).min(acc.len());
        let mut out = acc[..at].to_vec();
        out.extend_from_slice(&self.cfg.insert);
        out.extend_from_slice(&acc[end..]);
        out
    }
}

impl Adversary for CorruptAccumulatedRoute {
    fn kind(&self) -> &'static str {
        Self::KIND
    }

    fn on_frame(&mut self, ctx: &mut NodeCtx, node: &mut Node, frame: &Frame) -> Verdict {
        let Some(req) = relayable(frame, node) else { return Verdict::Pass };
        if !self.seen.insert(QueryKey::of(req)) || req.ttl == 0 {
            return Verdict::Consume;
        }
        let mut bent = req.clone();
        bent.accumulated_route = self.corrupt(&req.accumulated_route);
        let out = relayed(&bent, node.id);
        log_attack(ctx, "CorruptRoute");
        ctx.broadcast(node.id, Payload::Srp(Packet::Request(out)));
        Verdict::Consume
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplayParams {
    /// Replay offsets after first sighting, in milliseconds.
    pub delays_ms: Vec<u64>,
    /// Only record requests from this source.
    pub source: Option<NodeId>,
}

/// Records the first request it hears and rebroadcasts it unchanged later.
#[derive(Debug)]
pub struct ReplayRequest {
    cfg: ReplayParams,
    stored: Option<RouteRequest>,
}

impl ReplayRequest {
    pub const KIND: &'static str = "replay_request";

    pub fn create(s: &AttackSetup) -> Result<Box<dyn Adversary>, AttackError> {
        Ok(Box::new(ReplayRequest { cfg: s.parse(Self::KIND)?, stored: None }))
    }
}

impl Adversary for ReplayRequest {
    fn kind(&self) -> &'static str {
        Self::KIND
    }

    fn on_frame(&mut self, ctx: &mut NodeCtx, node: &mut Node, frame: &Frame) -> Verdict {
        let Some(req) = relayable(frame, node) else { return Verdict::Pass };
        if self.stored.is_none() && self.cfg.source.is_none_or(|s| s == req.source) {
            self.stored = Some(req.clone());
            for (i, d) in self.cfg.delays_ms.iter().enumerate() {
                ctx.timer(ctx.now + d * MS, Timer::Attack(i as u64));
            }
        }
        Verdict::Pass
    }

    fn on_timer(&mut self, ctx: &mut NodeCtx, node: &mut Node, _token: u64) {
        if let Some(req) = self.stored.clone() {
            log_attack(ctx, "Replay");
            ctx.broadcast(node.id, Payload::Srp(Packet::Request(req)));
        }
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictParams {
    pub source: NodeId,
    pub target: NodeId,
    /// Requests of the victim pair to watch before guessing.
    pub observe: usize,
    pub count: usize,
    pub ttl: u8,
    /// Gap between fabricated requests.
    pub interval_ms: u64,
}

impl Default for PredictParams {
    fn default() -> Self {
        PredictParams {
            source: NodeId::UNASSIGNED,
            target: NodeId::UNASSIGNED,
            observe: 1,
            count: 0,
            ttl: 16,
            interval_ms: 0,
        }
    }
}

/// Plants requests carrying the qids it expects the victim to use next, so
/// they are already in every query table when the genuine ones arrive.
#[derive(Debug)]
pub struct FloodPredictedQids {
    cfg: PredictParams,
    seen: BTreeSet<QueryKey>,
    last: Option<(u16, u32)>,
    rng: ChaCha8Rng,
}

impl FloodPredictedQids {
    pub const KIND: &'static str = "flood_predicted_qids";

    pub fn create(s: &AttackSetup) -> Result<Box<dyn Adversary>, AttackError> {
        let cfg: PredictParams = s.parse(Self::KIND)?;
        if !cfg.source.is_assigned() || !cfg.target.is_assigned() {
            return Err(bad_params(Self::KIND, "source and target are required"));
        }
        Ok(Box::new(FloodPredictedQids { cfg, seen: BTreeSet::new(), last: None, rng: s.rng() }))
    }
}

impl Adversary for FloodPredictedQids {
    fn kind(&self) -> &'static str {
        Self::KIND
    }

    fn on_frame(&mut self, ctx: &mut NodeCtx, node: &mut Node, frame: &Frame) -> Verdict {
        let Some(req) = relayable(frame, node) else { return Verdict::Pass };
        if (req.source, req.target) != (self.cfg.source, self.cfg.target) || !self.seen.insert(QueryKey::of(req)) {
            return Verdict::Pass;
        }
        if self.seen.len() <= self.cfg.observe {
            self.last = Some((req.qseq(), req.qid()));
            if self.seen.len() == self.cfg.observe && self.cfg.count > 0 {
                ctx.timer(ctx.now, Timer::Attack(0));
            }
        }
        Verdict::Pass
    }

    fn on_timer(&mut self, ctx: &mut NodeCtx, node: &mut Node, k: u64) {
        let Some((qseq, qid)) = self.last else { return };
        let mut header = SrpHeader::new(PacketType::Request, qseq.wrapping_add(1), qid.wrapping_add(k as u32 + 1));
        header.mac = garbage_mac(&mut self.rng);
        let req = RouteRequest {
            header: RequestHeader::Base(header),
            source: self.cfg.source,
            target: self.cfg.target,
            ttl: self.cfg.ttl,
            accumulated_route: vec![node.id],
        };
        if k == 0 {
            log_attack(ctx, "PredictQids");
        }
        ctx.broadcast(node.id, Payload::Srp(Packet::Request(req)));
        if (k as usize) + 1 < self.cfg.count {
            ctx.timer(ctx.now + self.cfg.interval_ms * MS, Timer::Attack(k + 1));
        }
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpoofParams {
    pub fake_id: Option<NodeId>,
}

/// Relays requests under a borrowed identity.
#[derive(Debug)]
pub struct SpoofRelay {
    fake: Option<NodeId>,
    seen: BTreeSet<QueryKey>,
}

impl SpoofRelay {
    pub const KIND: &'static str = "spoof_relay";

    pub fn create(s: &AttackSetup) -> Result<Box<dyn Adversary>, AttackError> {
        let cfg: SpoofParams = s.parse(Self::KIND)?;
        Ok(Box::new(SpoofRelay { fake: cfg.fake_id.filter(|&f| f != s.node), seen: BTreeSet::new() }))
    }
}

impl Adversary for SpoofRelay {
    fn kind(&self) -> &'static str {
        Self::KIND
    }

    fn aliases(&self) -> Vec<NodeId> {
        self.fake.into_iter().collect()
    }

    fn on_frame(&mut self, ctx: &mut NodeCtx, node: &mut Node, frame: &Frame) -> Verdict {
        let Some(fake) = self.fake else { return Verdict::Pass };
        let Some(req) = relayable(frame, node) else { return Verdict::Pass };
        if !self.seen.insert(QueryKey::of(req)) || req.ttl == 0 || req.accumulated_route.contains(&fake) {
            return Verdict::Consume;
        }
        log_attack(ctx, "Spoof");
        ctx.broadcast(fake, Payload::Srp(Packet::Request(relayed(req, fake))));
        Verdict::Consume
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultiSpoofParams {
    pub fake_ids: Vec<NodeId>,
    /// Also send one copy with an altered qid under the real id.
    pub modify_qid: bool,
    pub qid_xor: u32,
}

impl Default for MultiSpoofParams {
    fn default() -> Self {
        MultiSpoofParams { fake_ids: Vec::new(), modify_qid: false, qid_xor: 0x00ff_00ff }
    }
}

/// Relays each request several times, once per fake identity.
#[derive(Debug)]
pub struct MultiSpoofReplies {
    cfg: MultiSpoofParams,
    seen: BTreeSet<QueryKey>,
}

impl MultiSpoofReplies {
    pub const KIND: &'static str = "multi_spoof_replies";

    pub fn create(s: &AttackSetup) -> Result<Box<dyn Adversary>, AttackError> {
        let cfg: MultiSpoofParams = s.parse(Self::KIND)?;
        if cfg.fake_ids.is_empty() {
            return Err(bad_params(Self::KIND, "fake_ids must not be empty"));
        }
        Ok(Box::new(MultiSpoofReplies { cfg, seen: BTreeSet::new() }))
    }
}

impl Adversary for MultiSpoofReplies {
    fn kind(&self) -> &'static str {
        Self::KIND
    }

    fn aliases(&self) -> Vec<NodeId> {
        self.cfg.fake_ids.clone()
    }

    fn on_frame(&mut self, ctx: &mut NodeCtx, node: &mut Node, frame: &Frame) -> Verdict {
        let Some(req) = relayable(frame, node) else { return Verdict::Pass };
        if !self.seen.insert(QueryKey::of(req)) || req.ttl == 0 {
            return Verdict::Consume;
        }
        log_attack(ctx, "MultiSpoof");
        for &fake in &self.cfg.fake_ids {
            ctx.broadcast(fake, Payload::Srp(Packet::Request(relayed(req, fake))));
        }
        if self.cfg.modify_qid {
            let mut bent = relayed(req, node.id);
            bent.header.base_mut().qid ^= self.cfg.qid_xor;
            ctx.broadcast(node.id, Payload::Srp(Packet::Request(bent)));
        }
        Verdict::Consume
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FakeErrorParams {
    pub link: (NodeId, NodeId),
    /// Source route for the error; the first entry is the first hop.
    pub via: Vec<NodeId>,
    pub delay_ms: u64,
    pub reporter: Option<NodeId>,
}

impl Default for FakeErrorParams {
    fn default() -> Self {
        FakeErrorParams {
            link: (NodeId::UNASSIGNED, NodeId::UNASSIGNED),
            via: Vec::new(),
            delay_ms: 0,
            reporter: None,
        }
    }
}

/// Waits to learn a route containing `link`, then reports that link broken.
#[derive(Debug)]
pub struct FabricateRouteError {
    cfg: FakeErrorParams,
    route: Option<Vec<NodeId>>,
}

impl FabricateRouteError {
    pub const KIND: &'static str = "fabricate_route_error";

    pub fn create(s: &AttackSetup) -> Result<Box<dyn Adversary>, AttackError> {
        let cfg: FakeErrorParams = s.parse(Self::KIND)?;
        if cfg.via.is_empty() {
            return Err(bad_params(Self::KIND, "via must name at least the first hop"));
        }
        Ok(Box::new(FabricateRouteError { cfg, route: None }))
    }
}

impl Adversary for FabricateRouteError {
    fn kind(&self) -> &'static str {
        Self::KIND
    }

    fn on_frame(&mut self, ctx: &mut NodeCtx, _node: &mut Node, frame: &Frame) -> Verdict {
        if let Some(rep) = reply_of(frame) {
            if self.route.is_none() && contains_link(&rep.replied_route, self.cfg.link) {
                self.route = Some(rep.replied_route.clone());
                ctx.timer(ctx.now + self.cfg.delay_ms * MS, Timer::Attack(0));
            }
        }
        Verdict::Pass
    }

    fn on_timer(&mut self, ctx: &mut NodeCtx, node: &mut Node, _token: u64) {
        let Some(route) = self.route.clone() else { return };
        let err = RouteError {
            header: SrpHeader::new(PacketType::Error, 0, 0),
            reporter: self.cfg.reporter.unwrap_or(node.id),
            broken_link: self.cfg.link,
            reported_route: route,
            ip_source_route: self.cfg.via.clone(),
            traversed_route: Vec::new(),
        };
        log_attack(ctx, "FakeRouteError");
        ctx.unicast(self.cfg.via[0], node.id, Payload::Srp(Packet::Error(err)));
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TunnelRole {
    Entry,
    Exit,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TunnelParams {
    pub role: TunnelRole,
    pub peer: NodeId,
    /// Ids the exit claims lie between the two colluders.
    #[serde(default)]
    pub segment: Vec<NodeId>,
}

impl Default for TunnelParams {
    fn default() -> Self {
        TunnelParams { role: TunnelRole::Entry, peer: NodeId::UNASSIGNED, segment: Vec::new() }
    }
}

/// One end of a covert channel. The entry ships requests to the exit, which
/// rebroadcasts them as if they had crossed a fabricated segment; replies
/// return the same way.
#[derive(Debug)]
pub struct ColludeTunnel {
    cfg: TunnelParams,
    seen: BTreeSet<QueryKey>,
}

impl ColludeTunnel {
    pub const KIND: &'static str = "collude_tunnel";

    pub fn create(s: &AttackSetup) -> Result<Box<dyn Adversary>, AttackError> {
        if s.params.is_null() {
            return Err(bad_params(Self::KIND, "role and peer are required"));
        }
        let cfg: TunnelParams = s.parse(Self::KIND)?;
        if cfg.peer == s.node || !cfg.peer.is_assigned() {
            return Err(bad_params(Self::KIND, "peer must be another node"));
        }
        Ok(Box::new(ColludeTunnel { cfg, seen: BTreeSet::new() }))
    }

    pub fn role(&self) -> TunnelRole {
        self.cfg.role
    }

    fn entry(&mut self, ctx: &mut NodeCtx, node: &mut Node, frame: &Frame) -> Verdict {
        let peer = self.cfg.peer;
        if frame.via_tunnel {
            // A reply coming back: hand it to the next hop towards the source.
            let Some(rep) = reply_of(frame) else { return Verdict::Consume };
            let mut r = rep.clone();
            if r.ip_source_route.first() != Some(&node.id) || r.ip_source_route.len() < 2 {
                return Verdict::Consume;
            }
            r.ip_source_route.remove(0);
            let next = r.ip_source_route[0];
            if ctx.is_neighbor(next) {
                log_attack(ctx, "TunnelReplyOut");
                ctx.unicast(next, node.id, Payload::Srp(Packet::Reply(r)));
            }
            return Verdict::Consume;
        }
        let Some(req) = relayable(frame, node) else { return Verdict::Pass };
        let key = QueryKey::of(req);
        if self.seen.contains(&key) {
            return Verdict::Consume;
        }
        if !ctx.net.tunnel_usable(ctx.me, peer) {
            log_attack(ctx, "TunnelUnavailable");
            return Verdict::Pass;
        }
        self.seen.insert(key);
        log_attack(ctx, "TunnelIn");
        ctx.tunnel(peer, Payload::Srp(Packet::Request(req.clone())));
        Verdict::Consume
    }

    fn exit(&mut self, ctx: &mut NodeCtx, node: &mut Node, frame: &Frame) -> Verdict {
        let peer = self.cfg.peer;
        let seg = &self.cfg.segment;
        if frame.via_tunnel {
            let Some(req) = request_of(frame) else { return Verdict::Consume };
            if !self.seen.insert(QueryKey::of(req)) || req.ttl == 0 {
                return Verdict::Consume;
            }
            let mut out = req.clone();
            out.accumulated_route.push(peer);
            out.accumulated_route.extend_from_slice(seg);
            let out = relayed(&out, node.id);
            log_attack(ctx, "TunnelOut");
            ctx.broadcast(node.id, Payload::Srp(Packet::Request(out)));
            return Verdict::Consume;
        }
        if let Some(req) = relayable(frame, node) {
            return if self.seen.contains(&QueryKey::of(req)) { Verdict::Consume } else { Verdict::Pass };
        }
        let Some(rep) = reply_of(frame) else { return Verdict::Pass };
        if frame.overheard || rep.ip_source_route.first() != Some(&node.id) {
            return Verdict::Pass;
        }
        // Expect [me, seg reversed.., peer, ...] in the remaining source route.
        let hops = seg.len() + 1;
        let expected: Vec<NodeId> = seg.iter().rev().copied().chain([peer]).collect();
        if rep.ip_source_route.len() <= hops || rep.ip_source_route[1..=hops] != expected[..] {
            return Verdict::Pass;
        }
        let mut r = rep.clone();
        r.ip_source_route.drain(..hops);
        r.traversed_route.push(node.id);
        r.traversed_route.extend(seg.iter().rev().copied());
        log_attack(ctx, "TunnelReplyIn");
        ctx.tunnel(peer, Payload::Srp(Packet::Reply(r)));
        Verdict::Consume
    }
}

impl Adversary for ColludeTunnel {
    fn kind(&self) -> &'static str {
        Self::KIND
    }

    fn tunnel_peer(&self) -> Option<NodeId> {
        Some(self.cfg.peer)
    }

    fn on_frame(&mut self, ctx: &mut NodeCtx, node: &mut Node, frame: &Frame) -> Verdict {
        match self.cfg.role {
            TunnelRole::Entry => self.entry(ctx, node, frame),
            TunnelRole::Exit => self.exit(ctx, node, frame),
        }
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FloodParams {
    /// Requests per simulated second.
    pub rate: f64,
    pub start_ms: u64,
    pub duration_ms: Option<u64>,
    /// Rotate the claimed source over these ids.
    pub spoof_ids: Vec<NodeId>,
    pub ttl: u8,
}

impl Default for FloodParams {
    fn default() -> Self {
        FloodParams { rate: 100.0, start_ms: 0, duration_ms: None, spoof_ids: Vec::new(), ttl: 16 }
    }
}

/// Originates discoveries for random nonexistent targets as fast as allowed.
#[derive(Debug)]
pub struct QueryFlood {
    cfg: FloodParams,
    rng: ChaCha8Rng,
    interval: SimTime,
}

impl QueryFlood {
    pub const KIND: &'static str = "query_flood";

    pub fn create(s: &AttackSetup) -> Result<Box<dyn Adversary>, AttackError> {
        let cfg: FloodParams = s.parse(Self::KIND)?;
        if !(cfg.rate > 0.0) {
            return Err(bad_params(Self::KIND, "rate must be positive"));
        }
        let interval = ((1e6 / cfg.rate).round() as SimTime).max(1);
        Ok(Box::new(QueryFlood { cfg, rng: s.rng(), interval }))
    }
}

impl Adversary for QueryFlood {
    fn kind(&self) -> &'static str {
        Self::KIND
    }

    fn aliases(&self) -> Vec<NodeId> {
        self.cfg.spoof_ids.clone()
    }

    fn on_start(&mut self, ctx: &mut NodeCtx, _node: &mut Node) {
        ctx.timer(self.cfg.start_ms * MS, Timer::Attack(0));
    }

    fn on_frame(&mut self, _ctx: &mut NodeCtx, _node: &mut Node, _frame: &Frame) -> Verdict {
        Verdict::Pass
    }

    fn on_timer(&mut self, ctx: &mut NodeCtx, node: &mut Node, k: u64) {
        let end = self.cfg.duration_ms.map(|d| (self.cfg.start_ms + d) * MS);
        if end.is_some_and(|e| ctx.now >= e) {
            return;
        }
        let source = match self.cfg.spoof_ids.as_slice() {
            [] => node.id,
            ids => ids[k as usize % ids.len()],
        };
        let mut header = SrpHeader::new(PacketType::Request, self.rng.random(), self.rng.random());
        header.mac = garbage_mac(&mut self.rng);
        let req = RouteRequest {
            header: RequestHeader::Base(header),
            source,
            target: random_id(&mut self.rng),
            ttl: self.cfg.ttl,
            accumulated_route: Vec::new(),
        };
        if k == 0 {
            log_attack(ctx, "QueryFlood");
        }
        ctx.broadcast(source, Payload::Srp(Packet::Request(req)));
        ctx.timer(ctx.now + self.interval, Timer::Attack(k + 1));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversary::AttackRegistry;

    fn setup(params: &serde_json::Value) -> AttackSetup<'_> {
        AttackSetup { node: NodeId(101), seed: 1, params, leaked_keys: BTreeMap::new() }
    }

    #[test]
    fn registry_knows_every_kind() {
        let r = AttackRegistry::builtin();
        assert_eq!(r.kinds().count(), 11);
        let none = serde_json::Value::Null;
        for kind in ["fabricate_reply", "drop_requests", "tamper_reply", "replay_request", "spoof_relay"] {
            assert_eq!(r.create(kind, &setup(&none)).unwrap().kind(), kind);
        }
        assert!(matches!(r.create("jam", &setup(&none)), Err(AttackError::UnknownKind(_))));
    }

    #[test]
    fn params_are_validated() {
        let r = AttackRegistry::builtin();
        let bad = serde_json::json!({"rate": -1.0});
        assert!(matches!(r.create("query_flood", &setup(&bad)), Err(AttackError::BadParams { .. })));
        let typo = serde_json::json!({"fake": 3});
        assert!(r.create("spoof_relay", &setup(&typo)).is_err());
        assert!(r.create("collude_tunnel", &setup(&serde_json::Value::Null)).is_err());
        let ok = serde_json::json!({"role": "exit", "peer": 101});
        assert!(r.create("collude_tunnel", &setup(&ok)).is_err());
    }

    #[test]
    fn splice() {
        let p = serde_json::json!({"at": 0, "remove": 1, "insert": [250]});
        let s = setup(&p);
        let c = CorruptAccumulatedRoute { cfg: s.parse("x").unwrap(), seen: BTreeSet::new() };
        assert_eq!(c.corrupt(&[NodeId(2), NodeId(3)]), vec![NodeId(250), NodeId(3)]);
        assert_eq!(c.corrupt(&[]), vec![NodeId(250)]);
    }
}
