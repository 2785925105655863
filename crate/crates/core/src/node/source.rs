//! Source role: discovery initiation, reply and route-error validation, and
//! the route cache fed only by validated replies.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::params::ProtocolParams;
use crate::codec::{ExtendedSrpHeader, Flags, NodeId, PacketType, RequestHeader, RouteError, RouteReply, RouteRequest, SrpHeader};
use crate::crypto::{self, CryptoError, InrtScheme, Key, MacAlgorithm, ReplyCoverage, SecurityAssociation};
use crate::simnet::SimTime;

reason_codes! {
    pub enum ReplyRejection {
        StaleQuery,
        RouteMismatch,
        BadMac,
        DuplicateRoute,
        RouteLimit,
    }
}

reason_codes! {
    pub enum ErrorRejection {
        UnknownRoute,
        PrefixMismatch,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DiscoveryError {
    #[error("no security association with {0}")]
    NoSecurityAssociation(NodeId),
    #[error("a discovery for {0} is already pending")]
    Busy(NodeId),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

impl DiscoveryError {
    pub fn code(&self) -> &'static str {
        match self {
            DiscoveryError::NoSecurityAssociation(_) => "NoSecurityAssociation",
            DiscoveryError::Busy(_) => "Busy",
            DiscoveryError::Crypto(CryptoError::SaExhausted(..)) => "SaExhausted",
            DiscoveryError::Crypto(_) => "Crypto",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptedRoute {
    pub nodes: Vec<NodeId>,
    pub accepted_at: SimTime,
    /// Node whose key authenticated the reply: the target, or an
    /// intermediate group member.
    pub replier: NodeId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PendingQuery {
    pub target: NodeId,
    pub qseq: u16,
    pub qid: u32,
    pub issued_at: SimTime,
    pub deadline: SimTime,
    pub attempt: u32,
    pub accepted_routes: Vec<AcceptedRoute>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscoveryResult {
    pub source: NodeId,
    pub target: NodeId,
    pub qseq: u16,
    pub qid: u32,
    pub attempt: u32,
    pub issued_at: SimTime,
    pub closed_at: SimTime,
    pub routes: Vec<AcceptedRoute>,
}

impl DiscoveryResult {
    /// Time from issue to the first accepted reply.
    pub fn latency(&self) -> Option<SimTime> {
        self.routes.iter().map(|r| r.accepted_at - self.issued_at).min()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteStatus {
    Active,
    Broken,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CachedRoute {
    pub nodes: Vec<NodeId>,
    pub status: RouteStatus,
    pub accepted_at: SimTime,
}

#[derive(Clone, Debug, Default)]
pub struct RouteCache {
    routes: BTreeMap<NodeId, Vec<CachedRoute>>,
}

impl RouteCache {
    pub fn insert(&mut self, route: Vec<NodeId>, at: SimTime) {
        let Some(&target) = route.last() else { return };
        let list = self.routes.entry(target).or_default();
        match list.iter_mut().find(|c| c.nodes == route) {
            Some(existing) => {
                existing.status = RouteStatus::Active;
            }
            None => list.push(CachedRoute { nodes: route, status: RouteStatus::Active, accepted_at: at }),
        }
    }

    pub fn routes_to(&self, target: NodeId) -> &[CachedRoute] {
        self.routes.get(&target).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn is_active(&self, route: &[NodeId]) -> bool {
        route
            .last()
            .map(|t| self.routes_to(*t).iter().any(|c| c.nodes == route && c.status == RouteStatus::Active))
            .unwrap_or(false)
    }

    /// Fewest hops first, then earliest accepted.
    pub fn best(&self, target: NodeId) -> Option<&CachedRoute> {
        self.routes_to(target)
            .iter()
            .filter(|c| c.status == RouteStatus::Active)
            .min_by_key(|c| (c.nodes.len(), c.accepted_at))
    }

    pub fn mark_broken(&mut self, route: &[NodeId]) -> bool {
        let Some(t) = route.last() else { return false };
        match self.routes.get_mut(t).and_then(|l| l.iter_mut().find(|c| c.nodes == route)) {
            Some(c) => {
                c.status = RouteStatus::Broken;
                true
            }
            None => false,
        }
    }

    pub fn clear(&mut self) {
        self.routes.clear();
    }
}

#[derive(Clone, Debug, Default)]
pub struct SourceState {
    pub pending: BTreeMap<NodeId, PendingQuery>,
    pub cache: RouteCache,
    pub results: Vec<DiscoveryResult>,
}

impl SourceState {
    /// Builds the request for a new discovery and registers it as pending.
    #[allow(clippy::too_many_arguments)]
    pub fn initiate_discovery<R: Rng + ?Sized>(
        &mut self,
        me: NodeId,
        target: NodeId,
        sa: Option<&mut SecurityAssociation>,
        inrt: Option<&dyn InrtScheme>,
        params: &ProtocolParams,
        rng: &mut R,
        now: SimTime,
        attempt: u32,
    ) -> Result<RouteRequest, DiscoveryError> {
        let sa = sa.ok_or(DiscoveryError::NoSecurityAssociation(target))?;
        if self.pending.contains_key(&target) {
            return Err(DiscoveryError::Busy(target));
        }
        let (qseq, qid) = sa.next_query_ids(rng, params.qid_mode)?;
        let mut base = SrpHeader::new(PacketType::Request, qseq, qid);
        base.mac = crypto::request_mac(params.mac, &sa.key, me, target, qseq, qid);
        let header = match inrt.map(|s| s.issue(me, target, qseq, qid)) {
            Some(Ok(token)) => {
                base.flags = base.flags.with(Flags::INRT);
                RequestHeader::Extended(ExtendedSrpHeader { base, inrt: token })
            }
            // Tokens that cannot be issued (signature stub) degrade to a plain request.
            Some(Err(_)) | None => RequestHeader::Base(base),
        };
        self.pending.insert(
            target,
            PendingQuery {
                target,
                qseq,
                qid,
                issued_at: now,
                deadline: now + params.source_window(),
                attempt,
                accepted_routes: Vec::new(),
            },
        );
        Ok(RouteRequest { header, source: me, target, ttl: params.ttl, accumulated_route: Vec::new() })
    }

    /// Records an accepted route against the pending query and the cache.
    pub fn accept(&mut self, target: NodeId, route: Vec<NodeId>, replier: NodeId, now: SimTime) {
        if let Some(p) = self.pending.get_mut(&target) {
            p.accepted_routes.push(AcceptedRoute { nodes: route.clone(), accepted_at: now, replier });
        }
        self.cache.insert(route, now);
    }

    /// Closes the window of the pending query `(target, qseq)`, if it is
    /// still the pending one.
    pub fn on_reply_window_close(&mut self, me: NodeId, target: NodeId, qseq: u16, now: SimTime) -> Option<DiscoveryResult> {
        if self.pending.get(&target)?.qseq != qseq {
            return None;
        }
        let p = self.pending.remove(&target)?;
        let result = DiscoveryResult {
            source: me,
            target,
            qseq: p.qseq,
            qid: p.qid,
            attempt: p.attempt,
            issued_at: p.issued_at,
            closed_at: now,
            routes: p.accepted_routes,
        };
        self.results.push(result.clone());
        Some(result)
    }

    pub fn reset_volatile(&mut self) {
        self.pending.clear();
        self.cache.clear();
    }
}

/// Retry gap after `attempt` empty windows: base, 2*base, 4*base, ...
pub fn backoff_delay(base: SimTime, attempt: u32) -> SimTime {
    base.saturating_mul(1u64 << attempt.min(32))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidReply {
    pub route: Vec<NodeId>,
    pub replier: NodeId,
}

fn reversed(route: &[NodeId]) -> Vec<NodeId> {
    route.iter().rev().copied().collect()
}

fn has_repeats(route: &[NodeId]) -> bool {
    let mut seen = std::collections::BTreeSet::new();
    !route.iter().all(|n| seen.insert(*n))
}

/// Decides whether `reply` yields a route for the pending query.
///
/// Checks, in order: the reply belongs to the pending query; it arrived over
/// the reverse of the route it reports; its MAC verifies under the key shared
/// with the replier. `key_for` returns the SA key this source shares with a
/// node, if any.
pub fn validate_reply(
    me: NodeId,
    reply: &RouteReply,
    pending: Option<&PendingQuery>,
    alg: MacAlgorithm,
    key_for: impl Fn(NodeId) -> Option<Key>,
) -> Result<ValidReply, ReplyRejection> {
    let pending = pending.ok_or(ReplyRejection::StaleQuery)?;
    let h = &reply.header;
    if reply.source != me || reply.target != pending.target || h.qseq != pending.qseq || h.qid != pending.qid {
        return Err(ReplyRejection::StaleQuery);
    }
    if reply.ip_source_route != [me] {
        return Err(ReplyRejection::RouteMismatch);
    }
    let target = pending.target;

    let (route, replier, mac) = if h.flags.empty_payload() {
        let mut full = reply.traversed_route.clone();
        full.extend_from_slice(&reply.ip_source_route);
        let route = reversed(&full);
        if full.first() != Some(&target) || route.first() != Some(&me) || has_repeats(&route) {
            return Err(ReplyRejection::RouteMismatch);
        }
        let key = key_for(target).ok_or(ReplyRejection::BadMac)?;
        let mac = crypto::reply_mac(alg, &key, me, target, h.qseq, h.qid, ReplyCoverage::SourceRoute(&full));
        (route, target, mac)
    } else {
        let route = &reply.replied_route;
        if route.first() != Some(&me) || route.last() != Some(&target) || route.len() < 2 || has_repeats(route) {
            return Err(ReplyRejection::RouteMismatch);
        }
        // The replier originated the reply's source route: the target, or a
        // group member answering from its cache.
        let replier = *reply.traversed_route.first().ok_or(ReplyRejection::RouteMismatch)?;
        let end = route.iter().position(|&n| n == replier).ok_or(ReplyRejection::RouteMismatch)?;
        if end == 0 {
            return Err(ReplyRejection::RouteMismatch);
        }
        let mut arrived = reply.traversed_route.clone();
        arrived.push(me);
        if arrived != reversed(&route[..=end]) {
            return Err(ReplyRejection::RouteMismatch);
        }
        let key = key_for(replier).ok_or(ReplyRejection::BadMac)?;
        let mac = crypto::reply_mac(alg, &key, me, target, h.qseq, h.qid, ReplyCoverage::Payload(route));
        (route.clone(), replier, mac)
    };
    if !crypto::verify_mac(&h.mac, &mac) {
        return Err(ReplyRejection::BadMac);
    }
    if pending.accepted_routes.iter().any(|a| a.nodes == route) {
        return Err(ReplyRejection::DuplicateRoute);
    }
    Ok(ValidReply { route, replier })
}

/// Accepts a route error only if it travelled back over exactly the prefix
/// of an active cached route that ends at the reported broken link.
pub fn validate_route_error(me: NodeId, err: &RouteError, cache: &RouteCache) -> Result<(), ErrorRejection> {
    let route = &err.reported_route;
    if route.first() != Some(&me) || !cache.is_active(route) {
        return Err(ErrorRejection::UnknownRoute);
    }
    let (a, b) = err.broken_link;
    let at = route
        .windows(2)
        .position(|w| w[0] == a && w[1] == b)
        .ok_or(ErrorRejection::PrefixMismatch)?;
    if at == 0 || err.ip_source_route != [me] {
        return Err(ErrorRejection::PrefixMismatch);
    }
    let mut arrived = err.traversed_route.clone();
    arrived.push(me);
    if arrived != reversed(&route[..=at]) {
        return Err(ErrorRejection::PrefixMismatch);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::SrpHeader;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const S: NodeId = NodeId(100);
    const T: NodeId = NodeId(200);
    const M1: NodeId = NodeId(101);
    const M2: NodeId = NodeId(102);
    const KEY: Key = [0x42; 16];
    const ALG: MacAlgorithm = MacAlgorithm::HmacMd5;

    fn ids(v: &[u32]) -> Vec<NodeId> {
        v.iter().copied().map(NodeId).collect()
    }

    fn pending(qseq: u16, qid: u32) -> PendingQuery {
        PendingQuery { target: T, qseq, qid, issued_at: 0, deadline: 100, attempt: 0, accepted_routes: vec![] }
    }

    fn keys(n: NodeId) -> Option<Key> {
        (n == T).then_some(KEY)
    }

    /// A reply T would send for `route`, as it looks on arrival at S after an
    /// honest reverse traversal.
    fn arrived_reply(route: &[u32], qseq: u16, qid: u32) -> RouteReply {
        let route = ids(route);
        let mut header = SrpHeader::new(PacketType::Reply, qseq, qid);
        header.mac = crypto::reply_mac(ALG, &KEY, S, T, qseq, qid, ReplyCoverage::Payload(&route));
        let mut traversed = reversed(&route);
        traversed.pop();
        RouteReply { header, source: S, target: T, replied_route: route, ip_source_route: vec![S], traversed_route: traversed }
    }

    #[test]
    fn honest_reply_over_reverse_route_is_accepted() {
        let rep = arrived_reply(&[100, 1, 101, 5, 4, 200], 1, 77);
        let ok = validate_reply(S, &rep, Some(&pending(1, 77)), ALG, keys).unwrap();
        assert_eq!(ok.route, ids(&[100, 1, 101, 5, 4, 200]));
        assert_eq!(ok.replier, T);
    }

    #[test]
    fn fabricated_reply_without_key_fails_mac() {
        // M1 claims {S, M1, T} and forges a consistent source route.
        let mut header = SrpHeader::new(PacketType::Reply, 1, 77);
        header.mac = [0xA5; 16];
        let rep = RouteReply {
            header,
            source: S,
            target: T,
            replied_route: vec![S, M1, T],
            ip_source_route: vec![S],
            traversed_route: vec![T, M1],
        };
        assert_eq!(validate_reply(S, &rep, Some(&pending(1, 77)), ALG, keys), Err(ReplyRejection::BadMac));
    }

    #[test]
    fn tampered_payload_fails_mac() {
        let mut rep = arrived_reply(&[100, 1, 101, 5, 4, 200], 1, 77);
        rep.replied_route = ids(&[100, 1, 101, 190, 200]);
        rep.traversed_route = ids(&[200, 190, 101, 1]);
        assert_eq!(validate_reply(S, &rep, Some(&pending(1, 77)), ALG, keys), Err(ReplyRejection::BadMac));
    }

    #[test]
    fn rerouted_reply_fails_geometry() {
        let mut rep = arrived_reply(&[100, 1, 101, 5, 4, 200], 1, 77);
        rep.traversed_route = ids(&[200, 4, 5, 101, 3, 2]);
        assert_eq!(validate_reply(S, &rep, Some(&pending(1, 77)), ALG, keys), Err(ReplyRejection::RouteMismatch));
    }

    #[test]
    fn stale_and_foreign_replies() {
        let rep = arrived_reply(&[100, 1, 4, 200], 1, 77);
        assert_eq!(validate_reply(S, &rep, None, ALG, keys), Err(ReplyRejection::StaleQuery));
        assert_eq!(validate_reply(S, &rep, Some(&pending(2, 77)), ALG, keys), Err(ReplyRejection::StaleQuery));
        assert_eq!(validate_reply(S, &rep, Some(&pending(1, 78)), ALG, keys), Err(ReplyRejection::StaleQuery));
    }

    #[test]
    fn duplicate_route_is_not_accepted_twice() {
        let rep = arrived_reply(&[100, 1, 4, 200], 1, 77);
        let mut p = pending(1, 77);
        p.accepted_routes.push(AcceptedRoute { nodes: ids(&[100, 1, 4, 200]), accepted_at: 3, replier: T });
        assert_eq!(validate_reply(S, &rep, Some(&p), ALG, keys), Err(ReplyRejection::DuplicateRoute));
    }

    #[test]
    fn empty_payload_reply_uses_source_route() {
        let full = ids(&[200, 4, 1, 100]);
        let mut header = SrpHeader::new(PacketType::Reply, 1, 77);
        header.flags = Flags(Flags::EMPTY_PAYLOAD);
        header.mac = crypto::reply_mac(ALG, &KEY, S, T, 1, 77, ReplyCoverage::SourceRoute(&full));
        let rep = RouteReply {
            header,
            source: S,
            target: T,
            replied_route: vec![],
            ip_source_route: vec![S],
            traversed_route: ids(&[200, 4, 1]),
        };
        let ok = validate_reply(S, &rep, Some(&pending(1, 77)), ALG, keys).unwrap();
        assert_eq!(ok.route, ids(&[100, 1, 4, 200]));
        let mut detour = rep.clone();
        detour.traversed_route = ids(&[200, 4, 5, 1]);
        assert_eq!(validate_reply(S, &detour, Some(&pending(1, 77)), ALG, keys), Err(ReplyRejection::BadMac));
    }

    #[test]
    fn intermediate_replier_checked_on_prefix_under_its_key() {
        let v = NodeId(1);
        let kv: Key = [0x77; 16];
        let route = ids(&[100, 1, 4, 200]);
        let mut header = SrpHeader::new(PacketType::Reply, 1, 77);
        header.mac = crypto::reply_mac(ALG, &kv, S, T, 1, 77, ReplyCoverage::Payload(&route));
        let rep = RouteReply {
            header,
            source: S,
            target: T,
            replied_route: route.clone(),
            ip_source_route: vec![S],
            traversed_route: vec![v],
        };
        let key_for = |n: NodeId| match n {
            n if n == T => Some(KEY),
            n if n == v => Some(kv),
            _ => None,
        };
        let ok = validate_reply(S, &rep, Some(&pending(1, 77)), ALG, key_for).unwrap();
        assert_eq!((ok.route, ok.replier), (route, v));
        // Same reply, but S has no SA with the replier.
        assert_eq!(validate_reply(S, &rep, Some(&pending(1, 77)), ALG, keys), Err(ReplyRejection::BadMac));
    }

    fn cache_with(route: &[u32]) -> RouteCache {
        let mut c = RouteCache::default();
        c.insert(ids(route), 0);
        c
    }

    fn error(reporter: u32, traversed: &[u32]) -> RouteError {
        RouteError {
            header: SrpHeader::new(PacketType::Error, 0, 0),
            reporter: NodeId(reporter),
            broken_link: (NodeId(4), T),
            reported_route: ids(&[100, 1, 4, 200]),
            ip_source_route: vec![S],
            traversed_route: ids(traversed),
        }
    }

    #[test]
    fn honest_route_error_accepted() {
        let cache = cache_with(&[100, 1, 4, 200]);
        assert_eq!(validate_route_error(S, &error(4, &[4, 1]), &cache), Ok(()));
    }

    #[test]
    fn off_route_error_rejected() {
        let cache = cache_with(&[100, 1, 4, 200]);
        assert_eq!(
            validate_route_error(S, &error(102, &[102, 4, 1]), &cache),
            Err(ErrorRejection::PrefixMismatch)
        );
        let _ = M2;
    }

    #[test]
    fn error_for_unknown_or_broken_route() {
        let mut cache = cache_with(&[100, 2, 3, 200]);
        assert_eq!(validate_route_error(S, &error(4, &[4, 1]), &cache), Err(ErrorRejection::UnknownRoute));
        cache.insert(ids(&[100, 1, 4, 200]), 1);
        cache.mark_broken(&ids(&[100, 1, 4, 200]));
        assert_eq!(validate_route_error(S, &error(4, &[4, 1]), &cache), Err(ErrorRejection::UnknownRoute));
    }

    #[test]
    fn link_not_on_route_is_a_prefix_mismatch() {
        let cache = cache_with(&[100, 1, 4, 200]);
        let mut e = error(4, &[4, 1]);
        e.broken_link = (NodeId(5), T);
        assert_eq!(validate_route_error(S, &e, &cache), Err(ErrorRejection::PrefixMismatch));
    }

    #[test]
    fn discovery_bookkeeping() {
        let params = ProtocolParams { source_window_us: Some(50), ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut src = SourceState::default();
        let mut sa = SecurityAssociation::new(S, T, KEY, true);
        let req = src.initiate_discovery(S, T, Some(&mut sa), None, &params, &mut rng, 10, 0).unwrap();
        assert_eq!(req.qseq(), 1);
        assert!(req.accumulated_route.is_empty());
        assert_eq!(req.header.encoded_len(), 24);
        assert_eq!(req.header.base().mac, crypto::request_mac(ALG, &KEY, S, T, 1, req.qid()));
        assert_eq!(src.pending[&T].deadline, 60);
        assert_eq!(
            src.initiate_discovery(S, T, Some(&mut sa), None, &params, &mut rng, 11, 0),
            Err(DiscoveryError::Busy(T))
        );
        assert_eq!(
            src.initiate_discovery(S, M1, None, None, &params, &mut rng, 11, 0),
            Err(DiscoveryError::NoSecurityAssociation(M1))
        );
        src.accept(T, ids(&[100, 1, 4, 200]), T, 30);
        src.accept(T, ids(&[100, 2, 3, 102, 200]), T, 35);
        src.accept(T, ids(&[100, 1, 101, 5, 4, 200]), T, 40);
        let res = src.on_reply_window_close(S, T, 1, 60).unwrap();
        assert_eq!(res.routes.len(), 3);
        assert_eq!(res.latency(), Some(20));
        assert!(src.pending.is_empty());
        let req2 = src.initiate_discovery(S, T, Some(&mut sa), None, &params, &mut rng, 70, 0).unwrap();
        assert_eq!(req2.qseq(), 2);
        let empty = src.on_reply_window_close(S, T, 2, 120).unwrap();
        assert!(empty.routes.is_empty());
        assert_eq!(empty.latency(), None);
    }

    #[test]
    fn best_route_prefers_short_then_early() {
        let mut c = RouteCache::default();
        c.insert(ids(&[100, 2, 3, 102, 200]), 1);
        c.insert(ids(&[100, 1, 4, 200]), 5);
        c.insert(ids(&[100, 101, 4, 200]), 3);
        assert_eq!(c.best(T).unwrap().nodes, ids(&[100, 101, 4, 200]));
        c.mark_broken(&ids(&[100, 101, 4, 200]));
        assert_eq!(c.best(T).unwrap().nodes, ids(&[100, 1, 4, 200]));
    }

    #[test]
    fn backoff_doubles() {
        let base = 1_000_000;
        assert_eq!(
            (0..4).map(|a| backoff_delay(base, a)).collect::<Vec<_>>(),
            vec![1_000_000, 2_000_000, 4_000_000, 8_000_000]
        );
    }
}
