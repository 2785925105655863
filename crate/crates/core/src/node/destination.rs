//! Target role: request authentication with replay protection, and rationed
//! reply generation.

use std::collections::{BTreeMap, BTreeSet};

use super::params::ReplyMode;
use crate::codec::{Flags, NodeId, PacketType, RouteReply, RouteRequest, SrpHeader};
use crate::crypto::{self, MacAlgorithm, ReplyCoverage, SecurityAssociation};
use crate::simnet::SimTime;

reason_codes! {
    pub enum RequestRejection {
        NoSa,
        Replayed,
        BadMac,
    }
}

reason_codes! {
    pub enum ReplySuppression {
        WindowClosed,
        DuplicateNeighbor,
        CapReached,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplySession {
    pub source: NodeId,
    pub qseq: u16,
    pub qid: u32,
    pub window_end: SimTime,
    pub replies_sent: usize,
    /// Radios the request copies came from.
    pub repliers_seen: BTreeSet<NodeId>,
}

#[derive(Clone, Debug, Default)]
pub struct DestState {
    /// Latest discovery per source.
    pub sessions: BTreeMap<NodeId, ReplySession>,
}

impl DestState {
    /// Authenticates a request addressed to this node. The first valid copy
    /// of a discovery raises smax and opens its reply session; later copies
    /// of the same discovery carry qseq == smax and pass while that session
    /// exists.
    pub fn validate_request(
        &mut self,
        req: &RouteRequest,
        sa: Option<&mut SecurityAssociation>,
        alg: MacAlgorithm,
        now: SimTime,
        window: SimTime,
    ) -> Result<(), RequestRejection> {
        let sa = sa.ok_or(RequestRejection::NoSa)?;
        let (qseq, qid) = (req.qseq(), req.qid());
        let current = self.sessions.get(&req.source).is_some_and(|s| s.qseq == qseq);
        if qseq < sa.smax || (qseq == sa.smax && !current) {
            return Err(RequestRejection::Replayed);
        }
        let mac = crypto::request_mac(alg, &sa.key, req.source, req.target, qseq, qid);
        if !crypto::verify_mac(&req.header.base().mac, &mac) {
            return Err(RequestRejection::BadMac);
        }
        if qseq > sa.smax {
            sa.record_valid(qseq);
            self.sessions.insert(
                req.source,
                ReplySession {
                    source: req.source,
                    qseq,
                    qid,
                    window_end: now + window,
                    replies_sent: 0,
                    repliers_seen: BTreeSet::new(),
                },
            );
        }
        Ok(())
    }

    /// Builds the reply for an authenticated request, or explains why none
    /// is sent. `last_hop` is the radio that delivered the request.
    #[allow(clippy::too_many_arguments)]
    pub fn generate_reply(
        &mut self,
        me: NodeId,
        req: &RouteRequest,
        last_hop: NodeId,
        neighbor_count: usize,
        sa: &SecurityAssociation,
        mode: ReplyMode,
        alg: MacAlgorithm,
        now: SimTime,
    ) -> Result<RouteReply, ReplySuppression> {
        let session = self
            .sessions
            .get_mut(&req.source)
            .filter(|s| s.qseq == req.qseq())
            .ok_or(ReplySuppression::WindowClosed)?;
        if now > session.window_end {
            return Err(ReplySuppression::WindowClosed);
        }
        if session.repliers_seen.contains(&last_hop) {
            return Err(ReplySuppression::DuplicateNeighbor);
        }
        if session.replies_sent >= neighbor_count {
            return Err(ReplySuppression::CapReached);
        }
        session.repliers_seen.insert(last_hop);
        session.replies_sent += 1;

        let (qseq, qid) = (req.qseq(), req.qid());
        let mut header = SrpHeader::new(PacketType::Reply, qseq, qid);
        let mut ip: Vec<NodeId> = req.accumulated_route.iter().rev().copied().collect();
        ip.push(req.source);
        let replied_route = match mode {
            ReplyMode::Normal => {
                let mut route = vec![req.source];
                route.extend_from_slice(&req.accumulated_route);
                route.push(me);
                header.mac = crypto::reply_mac(alg, &sa.key, req.source, me, qseq, qid, ReplyCoverage::Payload(&route));
                route
            }
            ReplyMode::EmptyPayload => {
                header.flags = Flags(Flags::EMPTY_PAYLOAD);
                let mut created = vec![me];
                created.extend_from_slice(&ip);
                header.mac =
                    crypto::reply_mac(alg, &sa.key, req.source, me, qseq, qid, ReplyCoverage::SourceRoute(&created));
                Vec::new()
            }
        };
        Ok(RouteReply {
            header,
            source: req.source,
            target: me,
            replied_route,
            ip_source_route: ip,
            traversed_route: vec![me],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::RequestHeader;

    const S: NodeId = NodeId(100);
    const T: NodeId = NodeId(200);
    const KEY: [u8; 16] = [3; 16];
    const ALG: MacAlgorithm = MacAlgorithm::HmacMd5;

    fn sa() -> SecurityAssociation {
        SecurityAssociation::new(T, S, KEY, true)
    }

    fn req(qseq: u16, qid: u32, acc: &[u32]) -> RouteRequest {
        let mut h = SrpHeader::new(PacketType::Request, qseq, qid);
        h.mac = crypto::request_mac(ALG, &KEY, S, T, qseq, qid);
        RouteRequest {
            header: RequestHeader::Base(h),
            source: S,
            target: T,
            ttl: 12,
            accumulated_route: acc.iter().copied().map(NodeId).collect(),
        }
    }

    #[test]
    fn fresh_request_raises_smax() {
        let mut d = DestState::default();
        let mut a = sa();
        a.smax = 4;
        d.validate_request(&req(5, 1, &[1, 4]), Some(&mut a), ALG, 0, 100).unwrap();
        assert_eq!(a.smax, 5);
        // Another copy of the same discovery is still valid.
        d.validate_request(&req(5, 1, &[2, 3, 102]), Some(&mut a), ALG, 1, 100).unwrap();
    }

    #[test]
    fn replay_and_forgery() {
        let mut d = DestState::default();
        let mut a = sa();
        d.validate_request(&req(5, 1, &[]), Some(&mut a), ALG, 0, 100).unwrap();
        assert_eq!(d.validate_request(&req(4, 9, &[]), Some(&mut a), ALG, 5, 100), Err(RequestRejection::Replayed));
        let mut forged = req(6, 2, &[]);
        forged.header.base_mut().mac = [0; 16];
        assert_eq!(d.validate_request(&forged, Some(&mut a), ALG, 5, 100), Err(RequestRejection::BadMac));
        assert_eq!(a.smax, 5);
        let mut modified = req(5, 1, &[]);
        modified.header.base_mut().qid ^= 0x10;
        assert_eq!(d.validate_request(&modified, Some(&mut a), ALG, 5, 100), Err(RequestRejection::BadMac));
        assert_eq!(d.validate_request(&req(7, 1, &[]), None, ALG, 5, 100), Err(RequestRejection::NoSa));
    }

    #[test]
    fn replay_after_restart_of_session_state() {
        let mut d = DestState::default();
        let mut a = sa();
        d.validate_request(&req(5, 1, &[]), Some(&mut a), ALG, 0, 100).unwrap();
        d.sessions.clear();
        assert_eq!(d.validate_request(&req(5, 1, &[]), Some(&mut a), ALG, 5, 100), Err(RequestRejection::Replayed));
    }

    #[test]
    fn reply_content_and_rationing() {
        let mut d = DestState::default();
        let mut a = sa();
        let r = req(1, 7, &[1, 101, 5, 4]);
        d.validate_request(&r, Some(&mut a), ALG, 0, 100).unwrap();
        let rep = d.generate_reply(T, &r, NodeId(4), 2, &a, ReplyMode::Normal, ALG, 10).unwrap();
        let route: Vec<NodeId> = [100, 1, 101, 5, 4, 200].map(NodeId).into();
        assert_eq!(rep.replied_route, route);
        assert_eq!(rep.ip_source_route, [4, 5, 101, 1, 100].map(NodeId).to_vec());
        assert_eq!(rep.header.mac, crypto::reply_mac(ALG, &KEY, S, T, 1, 7, ReplyCoverage::Payload(&route)));

        let again = req(1, 7, &[1, 4]);
        d.validate_request(&again, Some(&mut a), ALG, 11, 100).unwrap();
        assert_eq!(
            d.generate_reply(T, &again, NodeId(4), 2, &a, ReplyMode::Normal, ALG, 11),
            Err(ReplySuppression::DuplicateNeighbor)
        );
        let via_m2 = req(1, 7, &[2, 3, 102]);
        assert!(d.generate_reply(T, &via_m2, NodeId(102), 2, &a, ReplyMode::Normal, ALG, 12).is_ok());
        assert_eq!(
            d.generate_reply(T, &via_m2, NodeId(9), 2, &a, ReplyMode::Normal, ALG, 13),
            Err(ReplySuppression::CapReached)
        );
        assert_eq!(
            d.generate_reply(T, &via_m2, NodeId(9), 3, &a, ReplyMode::Normal, ALG, 101),
            Err(ReplySuppression::WindowClosed)
        );
    }

    #[test]
    fn empty_payload_reply() {
        let mut d = DestState::default();
        let mut a = sa();
        let r = req(1, 7, &[1, 4]);
        d.validate_request(&r, Some(&mut a), ALG, 0, 100).unwrap();
        let rep = d.generate_reply(T, &r, NodeId(4), 2, &a, ReplyMode::EmptyPayload, ALG, 1).unwrap();
        assert!(rep.replied_route.is_empty());
        assert!(rep.header.flags.empty_payload());
        let created: Vec<NodeId> = [200, 4, 1, 100].map(NodeId).into();
        assert_eq!(rep.header.mac, crypto::reply_mac(ALG, &KEY, S, T, 1, 7, ReplyCoverage::SourceRoute(&created)));
        let normal = crypto::reply_mac(ALG, &KEY, S, T, 1, 7, ReplyCoverage::Payload(&[100, 1, 4, 200].map(NodeId)));
        assert_ne!(rep.header.mac, normal);
    }
}
