//! Wire format for SRP control packets.
//!
//! Every control packet starts with the fixed 24-byte SRP header:
//!
//! ```text
//!  0        1        2                 4                                 8
//! +--------+--------+--------+--------+--------+--------+--------+--------+
//! |  type  | flags  |      qseq       |               qid                 |
//! +--------+--------+--------+--------+--------+--------+--------+--------+
//! |                          mac (16 bytes)                               |
//! +-----------------------------------------------------------------------+
//! ```
//!
//! A request with flag bit 0 set carries a 16-byte intermediate node reply
//! token right after the base header. All integers are big-endian and route
//! lists are prefixed with a one-byte entry count.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const HEADER_LEN: usize = 24;
pub const EXTENDED_HEADER_LEN: usize = HEADER_LEN + TOKEN_LEN;
pub const TOKEN_LEN: usize = 16;
pub const MAX_ROUTE_LEN: usize = u8::MAX as usize;

pub type Mac = [u8; TOKEN_LEN];
pub type Token = [u8; TOKEN_LEN];

/// A node address. Stands in for an IPv4 address; `0` is reserved.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub const UNASSIGNED: NodeId = NodeId(0);

    pub fn is_assigned(self) -> bool {
        self != Self::UNASSIGNED
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for NodeId {
    fn from(v: u32) -> Self {
        NodeId(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum PacketType {
    Request = 0,
    Reply = 1,
    Error = 2,
}

impl PacketType {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(PacketType::Request),
            1 => Some(PacketType::Reply),
            2 => Some(PacketType::Error),
            _ => None,
        }
    }
}

/// Header flag bits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Flags(pub u8);

impl Flags {
    /// An intermediate node reply token follows the base header.
    pub const INRT: u8 = 0x01;
    /// Reply carries its route only in the source-route fields.
    pub const EMPTY_PAYLOAD: u8 = 0x02;
    const KNOWN: u8 = Self::INRT | Self::EMPTY_PAYLOAD;

    pub fn inrt(self) -> bool {
        self.0 & Self::INRT != 0
    }

    pub fn empty_payload(self) -> bool {
        self.0 & Self::EMPTY_PAYLOAD != 0
    }

    pub fn with(self, bit: u8) -> Self {
        Flags(self.0 | bit)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SrpHeader {
    pub pkt_type: PacketType,
    pub flags: Flags,
    pub qseq: u16,
    pub qid: u32,
    #[serde(with = "hex_bytes")]
    pub mac: Mac,
}

impl SrpHeader {
    pub fn new(pkt_type: PacketType, qseq: u16, qid: u32) -> Self {
        SrpHeader { pkt_type, flags: Flags::default(), qseq, qid, mac: [0; TOKEN_LEN] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExtendedSrpHeader {
    pub base: SrpHeader,
    #[serde(with = "hex_bytes")]
    pub inrt: Token,
}

/// Header of a route request: the base header, or the base header extended
/// with an INRT.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestHeader {
    Base(SrpHeader),
    Extended(ExtendedSrpHeader),
}

impl RequestHeader {
    pub fn base(&self) -> &SrpHeader {
        match self {
            RequestHeader::Base(h) => h,
            RequestHeader::Extended(e) => &e.base,
        }
    }

    pub fn base_mut(&mut self) -> &mut SrpHeader {
        match self {
            RequestHeader::Base(h) => h,
            RequestHeader::Extended(e) => &mut e.base,
        }
    }

    pub fn inrt(&self) -> Option<&Token> {
        match self {
            RequestHeader::Base(_) => None,
            RequestHeader::Extended(e) => Some(&e.inrt),
        }
    }

    pub fn encoded_len(&self) -> usize {
        match self {
            RequestHeader::Base(_) => HEADER_LEN,
            RequestHeader::Extended(_) => EXTENDED_HEADER_LEN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RouteRequest {
    pub header: RequestHeader,
    pub source: NodeId,
    pub target: NodeId,
    pub ttl: u8,
    /// Relays traversed so far; excludes source and target.
    pub accumulated_route: Vec<NodeId>,
}

impl RouteRequest {
    pub fn qseq(&self) -> u16 {
        self.header.base().qseq
    }

    pub fn qid(&self) -> u32 {
        self.header.base().qid
    }

    /// The node that claims to have transmitted this copy.
    pub fn last_hop(&self) -> NodeId {
        self.accumulated_route.last().copied().unwrap_or(self.source)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RouteReply {
    pub header: SrpHeader,
    pub source: NodeId,
    pub target: NodeId,
    /// Full source-to-target node sequence; empty in empty-payload mode.
    pub replied_route: Vec<NodeId>,
    /// Hops still to be traversed, ending with the source.
    pub ip_source_route: Vec<NodeId>,
    /// Hops already traversed, starting with the originator.
    pub traversed_route: Vec<NodeId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RouteError {
    pub header: SrpHeader,
    pub reporter: NodeId,
    pub broken_link: (NodeId, NodeId),
    pub reported_route: Vec<NodeId>,
    pub ip_source_route: Vec<NodeId>,
    pub traversed_route: Vec<NodeId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Packet {
    Request(RouteRequest),
    Reply(RouteReply),
    Error(RouteError),
}

impl Packet {
    pub fn header(&self) -> &SrpHeader {
        match self {
            Packet::Request(r) => r.header.base(),
            Packet::Reply(r) => &r.header,
            Packet::Error(e) => &e.header,
        }
    }

    pub fn pkt_type(&self) -> PacketType {
        match self {
            Packet::Request(_) => PacketType::Request,
            Packet::Reply(_) => PacketType::Reply,
            Packet::Error(_) => PacketType::Error,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("route list with {0} entries exceeds {MAX_ROUTE_LEN}")]
    EncodingOverflow(usize),
    #[error("header flags {flags:#04x} inconsistent with a {pkt_type:?} packet")]
    InconsistentFlags { pkt_type: PacketType, flags: u8 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("buffer truncated: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("unknown packet type {0:#04x}")]
    UnknownType(u8),
    #[error("malformed packet: {0}")]
    Malformed(&'static str),
}

pub fn encode_packet(pkt: &Packet) -> Result<Vec<u8>, EncodeError> {
    let mut w = Writer::default();
    match pkt {
        Packet::Request(req) => {
            let base = req.header.base();
            let extended = matches!(req.header, RequestHeader::Extended(_));
            if base.pkt_type != PacketType::Request
                || base.flags.inrt() != extended
                || base.flags.empty_payload()
                || base.flags.0 & !Flags::KNOWN != 0
            {
                return Err(EncodeError::InconsistentFlags { pkt_type: PacketType::Request, flags: base.flags.0 });
            }
            w.header(base);
            if let Some(token) = req.header.inrt() {
                w.bytes(token);
            }
            w.node(req.source);
            w.node(req.target);
            w.u8(req.ttl);
            w.route(&req.accumulated_route)?;
        }
        Packet::Reply(rep) => {
            let h = &rep.header;
            if h.pkt_type != PacketType::Reply
                || h.flags.inrt()
                || h.flags.0 & !Flags::KNOWN != 0
                || (h.flags.empty_payload() && !rep.replied_route.is_empty())
            {
                return Err(EncodeError::InconsistentFlags { pkt_type: PacketType::Reply, flags: h.flags.0 });
            }
            w.header(h);
            w.node(rep.source);
            w.node(rep.target);
            w.route(&rep.replied_route)?;
            w.route(&rep.ip_source_route)?;
            w.route(&rep.traversed_route)?;
        }
        Packet::Error(err) => {
            let h = &err.header;
            if h.pkt_type != PacketType::Error || h.flags.0 != 0 {
                return Err(EncodeError::InconsistentFlags { pkt_type: PacketType::Error, flags: h.flags.0 });
            }
            w.header(h);
            w.node(err.reporter);
            w.node(err.broken_link.0);
            w.node(err.broken_link.1);
            w.route(&err.reported_route)?;
            w.route(&err.ip_source_route)?;
            w.route(&err.traversed_route)?;
        }
    }
    Ok(w.buf)
}

/// Decodes one packet. Total: returns an error for any byte sequence that is
/// not exactly one canonical packet.
pub fn decode_packet(raw: &[u8]) -> Result<Packet, DecodeError> {
    let mut r = Reader { buf: raw, pos: 0 };
    let header = r.header()?;
    let flags = header.flags;
    if flags.0 & !Flags::KNOWN != 0 {
        return Err(DecodeError::Malformed("unknown flag bits"));
    }
    let pkt = match header.pkt_type {
        PacketType::Request => {
            if flags.empty_payload() {
                return Err(DecodeError::Malformed("empty-payload flag on a request"));
            }
            let header = if flags.inrt() {
                RequestHeader::Extended(ExtendedSrpHeader { base: header, inrt: r.array()? })
            } else {
                RequestHeader::Base(header)
            };
            let source = r.node()?;
            let target = r.node()?;
            let ttl = r.u8()?;
            let accumulated_route = r.route()?;
            Packet::Request(RouteRequest { header, source, target, ttl, accumulated_route })
        }
        PacketType::Reply => {
            if flags.inrt() {
                return Err(DecodeError::Malformed("INRT flag on a reply"));
            }
            let source = r.node()?;
            let target = r.node()?;
            let replied_route = r.route()?;
            if flags.empty_payload() && !replied_route.is_empty() {
                return Err(DecodeError::Malformed("empty-payload reply carries a route"));
            }
            let ip_source_route = r.route()?;
            let traversed_route = r.route()?;
            Packet::Reply(RouteReply { header, source, target, replied_route, ip_source_route, traversed_route })
        }
        PacketType::Error => {
            if flags.0 != 0 {
                return Err(DecodeError::Malformed("flags set on a route error"));
            }
            let reporter = r.node()?;
            let broken_link = (r.node()?, r.node()?);
            let reported_route = r.route()?;
            let ip_source_route = r.route()?;
            let traversed_route = r.route()?;
            Packet::Error(RouteError { header, reporter, broken_link, reported_route, ip_source_route, traversed_route })
        }
    };
    if r.pos != raw.len() {
        return Err(DecodeError::Malformed("trailing bytes"));
    }
    Ok(pkt)
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    fn node(&mut self, n: NodeId) {
        self.bytes(&n.0.to_be_bytes());
    }

    fn header(&mut self, h: &SrpHeader) {
        self.u8(h.pkt_type as u8);
        self.u8(h.flags.0);
        self.bytes(&h.qseq.to_be_bytes());
        self.bytes(&h.qid.to_be_bytes());
        self.bytes(&h.mac);
    }

    fn route(&mut self, route: &[NodeId]) -> Result<(), EncodeError> {
        if route.len() > MAX_ROUTE_LEN {
            return Err(EncodeError::EncodingOverflow(route.len()));
        }
        self.u8(route.len() as u8);
        for n in route {
            self.node(*n);
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(DecodeError::Truncated { offset: self.pos, needed: n }),
        }
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn node(&mut self) -> Result<NodeId, DecodeError> {
        Ok(NodeId(u32::from_be_bytes(self.array()?)))
    }

    fn header(&mut self) -> Result<SrpHeader, DecodeError> {
        let type_byte = self.u8()?;
        let pkt_type = PacketType::from_byte(type_byte).ok_or(DecodeError::UnknownType(type_byte))?;
        let flags = Flags(self.u8()?);
        let qseq = u16::from_be_bytes(self.array()?);
        let qid = u32::from_be_bytes(self.array()?);
        let mac = self.array()?;
        Ok(SrpHeader { pkt_type, flags, qseq, qid, mac })
    }

    fn route(&mut self) -> Result<Vec<NodeId>, DecodeError> {
        let n = self.u8()? as usize;
        if self.buf.len() - self.pos < n * 4 {
            return Err(DecodeError::Malformed("route length exceeds buffer"));
        }
        (0..n).map(|_| self.node()).collect()
    }
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8; 16], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 16], D::Error> {
        let s = String::deserialize(d)?;
        let v = hex::decode(&s).map_err(serde::de::Error::custom)?;
        v.try_into().map_err(|_| serde::de::Error::custom("expected 16 bytes"))
    }
}
