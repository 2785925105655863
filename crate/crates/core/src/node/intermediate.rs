//! Relay role: duplicate suppression, rate-ranked relay scheduling, strict
//! source-routed forwarding, link-failure reporting and cache replies.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use super::params::{ProtocolParams, SchedulerParams};
use crate::codec::{NodeId, PacketType, RouteError, RouteReply, RouteRequest, SrpHeader};
use crate::crypto::{self, InrtScheme, Key, MacAlgorithm, ReplyCoverage};
use crate::simnet::SimTime;

reason_codes! {
    pub enum RelayDrop {
        OwnRequest,
        Duplicate,
        TtlExpired,
        Loop,
        QueueExpired,
        NotAddressed,
        NextHopUnreachable,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct QueryKey {
    pub source: NodeId,
    pub target: NodeId,
    pub qid: u32,
}

impl QueryKey {
    pub fn of(req: &RouteRequest) -> Self {
        QueryKey { source: req.source, target: req.target, qid: req.qid() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QueryTableEntry {
    pub source: NodeId,
    pub target: NodeId,
    pub qid: u32,
    pub inserted_at: SimTime,
}

/// Bounded dedupe store with least-recently-used eviction. A lookup hit
/// counts as a use.
#[derive(Clone, Debug)]
pub struct QueryTable {
    capacity: usize,
    clock: u64,
    entries: BTreeMap<QueryKey, (u64, SimTime)>,
    recency: BTreeMap<u64, QueryKey>,
}

impl QueryTable {
    pub fn new(capacity: usize) -> Self {
        QueryTable { capacity: capacity.max(1), clock: 0, entries: BTreeMap::new(), recency: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, key: &QueryKey) -> bool {
        self.entries.contains_key(key)
    }

    /// True if present; refreshes recency on a hit.
    pub fn check_and_touch(&mut self, key: &QueryKey) -> bool {
        let Some((stamp, _)) = self.entries.get_mut(key) else { return false };
        self.recency.remove(stamp);
        self.clock += 1;
        *stamp = self.clock;
        self.recency.insert(self.clock, *key);
        true
    }

    /// Inserts a fresh entry, returning the evicted key if the table was full.
    pub fn insert(&mut self, key: QueryKey, now: SimTime) -> Option<QueryKey> {
        if self.check_and_touch(&key) {
            return None;
        }
        let evicted = if self.entries.len() >= self.capacity {
            let (_, old) = self.recency.pop_first().expect("full table has entries");
            self.entries.remove(&old);
            Some(old)
        } else {
            None
        };
        self.clock += 1;
        self.entries.insert(key, (self.clock, now));
        self.recency.insert(self.clock, key);
        evicted
    }

    pub fn entries(&self) -> impl Iterator<Item = QueryTableEntry> + '_ {
        self.entries.iter().map(|(k, &(_, at))| QueryTableEntry {
            source: k.source,
            target: k.target,
            qid: k.qid,
            inserted_at: at,
        })
    }
}

#[derive(Clone, Debug)]
pub struct NeighborRateState {
    pub neighbor: NodeId,
    pub ewma_rate: f64,
    pub priority_class: u8,
    window: VecDeque<SimTime>,
    claimed_ids: BTreeSet<NodeId>,
}

impl NeighborRateState {
    fn new(neighbor: NodeId) -> Self {
        NeighborRateState {
            neighbor,
            ewma_rate: 0.0,
            priority_class: 0,
            window: VecDeque::new(),
            claimed_ids: BTreeSet::new(),
        }
    }

    /// Whether this transmitter has shown up under more than one network id.
    pub fn multi_id(&self) -> bool {
        self.claimed_ids.len() > 1
    }

    fn observe(&mut self, claimed: NodeId, now: SimTime, p: &SchedulerParams, hardening: bool) {
        self.window.push_back(now);
        while self.window.front().is_some_and(|&t| t + p.rate_window_us <= now) {
            self.window.pop_front();
        }
        let per_sec = self.window.len() as f64 * 1e6 / p.rate_window_us as f64;
        self.ewma_rate += p.ewma_alpha * (per_sec - self.ewma_rate);
        self.claimed_ids.insert(claimed);
        self.priority_class = if hardening && self.multi_id() {
            (SchedulerParams::CLASSES - 1) as u8
        } else {
            p.class_for_rate(self.ewma_rate)
        };
    }
}

/// Per-neighbor query-rate estimates and the resulting priority classes.
#[derive(Clone, Debug, Default)]
pub struct RateTable {
    states: BTreeMap<NodeId, NeighborRateState>,
}

impl RateTable {
    pub fn observe(&mut self, key: NodeId, claimed: NodeId, now: SimTime, p: &SchedulerParams, hardening: bool) -> u8 {
        let s = self.states.entry(key).or_insert_with(|| NeighborRateState::new(key));
        s.observe(claimed, now, p, hardening);
        s.priority_class
    }

    pub fn class_of(&self, key: NodeId) -> u8 {
        self.states.get(&key).map_or(0, |s| s.priority_class)
    }

    pub fn get(&self, key: NodeId) -> Option<&NeighborRateState> {
        self.states.get(&key)
    }

    pub fn iter(&self) -> impl Iterator<Item = &NeighborRateState> {
        self.states.values()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueuedRelay {
    /// Ready to transmit: own id appended, ttl decremented.
    pub request: RouteRequest,
    /// Rate-table key the request was charged to.
    pub neighbor: NodeId,
    pub enqueued_at: SimTime,
    pub expires_at: SimTime,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ServiceOutcome {
    pub relayed: Vec<QueuedRelay>,
    pub expired: Vec<QueuedRelay>,
}

/// FIFO per neighbor; classes share one token bucket each, sized and
/// refilled in proportion to the class quantum.
#[derive(Clone, Debug, Default)]
pub struct RelayQueue {
    per_neighbor: BTreeMap<NodeId, VecDeque<QueuedRelay>>,
    tokens: Option<[f64; SchedulerParams::CLASSES]>,
    last_refill: SimTime,
    cursor: [Option<NodeId>; SchedulerParams::CLASSES],
}

impl RelayQueue {
    pub fn enqueue(&mut self, entry: QueuedRelay) {
        self.per_neighbor.entry(entry.neighbor).or_default().push_back(entry);
    }

    pub fn len(&self) -> usize {
        self.per_neighbor.values().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.per_neighbor.values().all(VecDeque::is_empty)
    }

    pub fn clear(&mut self) {
        *self = RelayQueue::default();
    }

    fn refill(&mut self, now: SimTime, p: &SchedulerParams) {
        let full = p.quanta.map(f64::from);
        let tokens = self.tokens.get_or_insert(full);
        let elapsed = now.saturating_sub(self.last_refill) as f64 / 1e6;
        for (t, q) in tokens.iter_mut().zip(full) {
            *t = (*t + q * p.refill_per_quantum * elapsed).min(q);
        }
        self.last_refill = now;
    }

    /// One scheduler round: refill, drop expired entries, then serve classes
    /// from highest priority down, round-robin by neighbor within a class.
    pub fn service(&mut self, now: SimTime, rates: &RateTable, p: &SchedulerParams) -> ServiceOutcome {
        self.refill(now, p);
        let mut out = ServiceOutcome::default();
        for q in self.per_neighbor.values_mut() {
            let (keep, gone): (Vec<_>, Vec<_>) = q.drain(..).partition(|e| e.expires_at > now);
            *q = keep.into();
            out.expired.extend(gone);
        }
        self.per_neighbor.retain(|_, q| !q.is_empty());
        let tokens = self.tokens.as_mut().expect("refilled");
        for class in 0..SchedulerParams::CLASSES {
            loop {
                if tokens[class] < 1.0 {
                    break;
                }
                let members: Vec<NodeId> = self
                    .per_neighbor
                    .iter()
                    .filter(|(n, q)| !q.is_empty() && usize::from(rates.class_of(**n)) == class)
                    .map(|(n, _)| *n)
                    .collect();
                if members.is_empty() {
                    break;
                }
                let next = match self.cursor[class] {
                    Some(c) => members.iter().copied().find(|&n| n > c).unwrap_or(members[0]),
                    None => members[0],
                };
                let entry = self.per_neighbor.get_mut(&next).and_then(VecDeque::pop_front).expect("member has work");
                tokens[class] -= 1.0;
                self.cursor[class] = Some(next);
                out.relayed.push(entry);
            }
        }
        self.per_neighbor.retain(|_, q| !q.is_empty());
        out
    }
}

#[derive(Clone, Debug)]
pub struct RelayState {
    pub table: QueryTable,
    pub rates: RateTable,
    pub queue: RelayQueue,
    pub tick_pending: Option<SimTime>,
    /// Routes this node may answer from; only ever pre-seeded.
    pub route_cache: BTreeMap<NodeId, Vec<NodeId>>,
    pub basis_seen: BTreeSet<(NodeId, NodeId, u32)>,
}

impl RelayState {
    pub fn new(params: &ProtocolParams) -> Self {
        RelayState {
            table: QueryTable::new(params.query_table_size),
            rates: RateTable::default(),
            queue: RelayQueue::default(),
            tick_pending: None,
            route_cache: BTreeMap::new(),
            basis_seen: BTreeSet::new(),
        }
    }

    /// First half of request handling: dedupe, ttl and loop checks, table
    /// insert and rate update. Returns the rate-table key on admission.
    pub fn admit(
        &mut self,
        me: NodeId,
        req: &RouteRequest,
        transmitter: NodeId,
        now: SimTime,
        params: &ProtocolParams,
    ) -> Result<NodeId, RelayDrop> {
        if req.source == me {
            return Err(RelayDrop::OwnRequest);
        }
        let key = QueryKey::of(req);
        if self.table.check_and_touch(&key) {
            return Err(RelayDrop::Duplicate);
        }
        if req.ttl == 0 {
            return Err(RelayDrop::TtlExpired);
        }
        if req.accumulated_route.contains(&me) {
            return Err(RelayDrop::Loop);
        }
        self.table.insert(key, now);
        let claimed = req.last_hop();
        let rate_key = if params.hardening { transmitter } else { claimed };
        self.rates.observe(rate_key, claimed, now, &params.scheduler, params.hardening);
        Ok(rate_key)
    }

    /// Second half: append `as_id`, spend one ttl, queue for rebroadcast.
    pub fn enqueue(&mut self, mut req: RouteRequest, as_id: NodeId, rate_key: NodeId, now: SimTime, params: &ProtocolParams) {
        req.accumulated_route.push(as_id);
        req.ttl -= 1;
        self.queue.enqueue(QueuedRelay {
            request: req,
            neighbor: rate_key,
            enqueued_at: now,
            expires_at: now + params.scheduler.queue_expiry_us,
        });
    }

    /// admit + enqueue under the node's own id.
    pub fn handle_request(
        &mut self,
        me: NodeId,
        req: &RouteRequest,
        transmitter: NodeId,
        now: SimTime,
        params: &ProtocolParams,
    ) -> Result<(), RelayDrop> {
        let key = self.admit(me, req, transmitter, now, params)?;
        self.enqueue(req.clone(), me, key, now, params);
        Ok(())
    }

    pub fn scheduler_service(&mut self, now: SimTime, params: &ProtocolParams) -> ServiceOutcome {
        self.queue.service(now, &self.rates, &params.scheduler)
    }

    pub fn reset(&mut self, params: &ProtocolParams) {
        let cache = std::mem::take(&mut self.route_cache);
        *self = RelayState::new(params);
        // Pre-seeded routes model configuration, not learnt state.
        self.route_cache = cache;
    }
}

/// First scheduler tick strictly after `now`.
pub fn next_tick(now: SimTime, tick: SimTime) -> SimTime {
    (now / tick + 1) * tick
}

/// Shared source-route step for replies and errors: checks this node is the
/// named next hop, pops it, and returns (id used, next hop).
pub fn advance_source_route(
    my_ids: &BTreeSet<NodeId>,
    ip_source_route: &mut Vec<NodeId>,
    traversed_route: &mut Vec<NodeId>,
    is_neighbor: impl Fn(NodeId) -> bool,
) -> Result<(NodeId, NodeId), RelayDrop> {
    let head = *ip_source_route.first().ok_or(RelayDrop::NotAddressed)?;
    if !my_ids.contains(&head) || ip_source_route.len() < 2 {
        return Err(RelayDrop::NotAddressed);
    }
    let next = ip_source_route[1];
    if !is_neighbor(next) {
        return Err(RelayDrop::NextHopUnreachable);
    }
    ip_source_route.remove(0);
    traversed_route.push(head);
    Ok((head, next))
}

pub fn relay_reply(
    my_ids: &BTreeSet<NodeId>,
    reply: &RouteReply,
    is_neighbor: impl Fn(NodeId) -> bool,
) -> Result<(NodeId, NodeId, RouteReply), RelayDrop> {
    let mut r = reply.clone();
    let (as_id, next) = advance_source_route(my_ids, &mut r.ip_source_route, &mut r.traversed_route, is_neighbor)?;
    Ok((as_id, next, r))
}

pub fn relay_error(
    my_ids: &BTreeSet<NodeId>,
    err: &RouteError,
    is_neighbor: impl Fn(NodeId) -> bool,
) -> Result<(NodeId, NodeId, RouteError), RelayDrop> {
    let mut e = err.clone();
    let (as_id, next) = advance_source_route(my_ids, &mut e.ip_source_route, &mut e.traversed_route, is_neighbor)?;
    Ok((as_id, next, e))
}

/// Source-routed application payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataPacket {
    pub source: NodeId,
    pub target: NodeId,
    pub seq: u32,
    pub route: Vec<NodeId>,
    /// Index in `route` of the node currently holding the packet.
    pub at: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DataOutcome {
    Delivered,
    Forward { as_id: NodeId, next_hop: NodeId, packet: DataPacket },
    /// The next link is down; report it back along the traversed prefix.
    Broken { as_id: NodeId, next_hop: Option<NodeId>, error: RouteError },
}

pub fn forward_data(
    my_ids: &BTreeSet<NodeId>,
    pkt: &DataPacket,
    is_neighbor: impl Fn(NodeId) -> bool,
) -> Result<DataOutcome, RelayDrop> {
    let me = *pkt.route.get(pkt.at).ok_or(RelayDrop::NotAddressed)?;
    if !my_ids.contains(&me) {
        return Err(RelayDrop::NotAddressed);
    }
    if pkt.at + 1 == pkt.route.len() {
        return Ok(DataOutcome::Delivered);
    }
    let next = pkt.route[pkt.at + 1];
    if is_neighbor(next) {
        let mut fwd = pkt.clone();
        fwd.at += 1;
        return Ok(DataOutcome::Forward { as_id: me, next_hop: next, packet: fwd });
    }
    let ip: Vec<NodeId> = pkt.route[..pkt.at].iter().rev().copied().collect();
    let error = RouteError {
        header: SrpHeader::new(PacketType::Error, 0, 0),
        reporter: me,
        broken_link: (me, next),
        reported_route: pkt.route.clone(),
        ip_source_route: ip.clone(),
        traversed_route: vec![me],
    };
    Ok(DataOutcome::Broken { as_id: me, next_hop: ip.first().copied(), error })
}

/// Cache reply on behalf of the target. `key_with_source` is the SA key this
/// node shares with the request's source.
pub fn try_inrt_reply(
    me: NodeId,
    req: &RouteRequest,
    scheme: Option<&dyn InrtScheme>,
    route_cache: &BTreeMap<NodeId, Vec<NodeId>>,
    key_with_source: Option<&Key>,
    alg: MacAlgorithm,
) -> Option<RouteReply> {
    let token = req.header.inrt()?;
    let scheme = scheme?;
    let key = key_with_source?;
    let cached = route_cache.get(&req.target)?;
    if cached.first() != Some(&me) || cached.last() != Some(&req.target) {
        return None;
    }
    let (qseq, qid) = (req.qseq(), req.qid());
    if !scheme.verify(token, req.source, req.target, qseq, qid).unwrap_or(false) {
        return None;
    }
    let mut route = vec![req.source];
    route.extend_from_slice(&req.accumulated_route);
    route.extend_from_slice(cached);
    let mut seen = BTreeSet::new();
    if !route.iter().all(|n| seen.insert(*n)) {
        return None;
    }
    let mut header = SrpHeader::new(PacketType::Reply, qseq, qid);
    header.mac = crypto::reply_mac(alg, key, req.source, req.target, qseq, qid, ReplyCoverage::Payload(&route));
    let mut ip: Vec<NodeId> = req.accumulated_route.iter().rev().copied().collect();
    ip.push(req.source);
    Some(RouteReply {
        header,
        source: req.source,
        target: req.target,
        replied_route: route,
        ip_source_route: ip,
        traversed_route: vec![me],
    })
}
