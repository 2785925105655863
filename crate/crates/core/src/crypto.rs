//! Keys, security associations and the keyed hashes carried in SRP headers.

use std::cell::Cell;
use std::collections::BTreeSet;

use hmac::{Hmac, Mac as _};
use md5::Md5;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha1::Sha1;
use subtle::ConstantTimeEq;
use thiserror::Error;

use crate::codec::{Flags, Mac, NodeId, PacketType, Token, TOKEN_LEN};

pub type Key = [u8; 16];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("query sequence space of SA {0}->{1} is exhausted; re-establish the SA")]
    SaExhausted(NodeId, NodeId),
    #[error("{0} is not supported")]
    Unsupported(&'static str),
    #[error("invalid key: {0}")]
    BadKey(String),
}

/// Keyed hash used for every MAC and INRT.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MacAlgorithm {
    #[default]
    HmacMd5,
    /// HMAC-SHA1 truncated to 16 bytes.
    HmacSha1,
}

/// How sources pick query identifiers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QidMode {
    #[default]
    Random,
    /// Qid equals qseq. Predictable; only for control runs.
    Sequential,
}

thread_local! {
    static MAC_OPS: Cell<u64> = const { Cell::new(0) };
}

/// Number of keyed-hash computations performed on this thread so far.
pub fn mac_operations() -> u64 {
    MAC_OPS.with(Cell::get)
}

/// Raw HMAC over `data`, truncated to 16 bytes.
pub fn keyed_hash(alg: MacAlgorithm, key: &[u8], data: &[u8]) -> Mac {
    MAC_OPS.with(|c| c.set(c.get() + 1));
    let mut out = [0u8; TOKEN_LEN];
    match alg {
        MacAlgorithm::HmacMd5 => {
            let mut m = Hmac::<Md5>::new_from_slice(key).expect("hmac accepts any key length");
            m.update(data);
            out.copy_from_slice(&m.finalize().into_bytes());
        }
        MacAlgorithm::HmacSha1 => {
            let mut m = Hmac::<Sha1>::new_from_slice(key).expect("hmac accepts any key length");
            m.update(data);
            out.copy_from_slice(&m.finalize().into_bytes()[..TOKEN_LEN]);
        }
    }
    out
}

fn request_fields(source: NodeId, target: NodeId, qseq: u16, qid: u32) -> [u8; 15] {
    let mut buf = [0u8; 15];
    buf[0] = PacketType::Request as u8;
    buf[1..5].copy_from_slice(&source.0.to_be_bytes());
    buf[5..9].copy_from_slice(&target.0.to_be_bytes());
    buf[9..11].copy_from_slice(&qseq.to_be_bytes());
    buf[11..15].copy_from_slice(&qid.to_be_bytes());
    buf
}

/// MAC over the immutable request fields. The accumulated route is not covered.
pub fn request_mac(alg: MacAlgorithm, key: &Key, source: NodeId, target: NodeId, qseq: u16, qid: u32) -> Mac {
    keyed_hash(alg, key, &request_fields(source, target, qseq, qid))
}

/// What a reply MAC covers.
#[derive(Clone, Copy, Debug)]
pub enum ReplyCoverage<'a> {
    /// Normal mode: the replied route in the payload.
    Payload(&'a [NodeId]),
    /// Empty-payload mode: the full source route as created by the replier,
    /// replier first.
    SourceRoute(&'a [NodeId]),
}

pub fn reply_mac(
    alg: MacAlgorithm,
    key: &Key,
    source: NodeId,
    target: NodeId,
    qseq: u16,
    qid: u32,
    coverage: ReplyCoverage<'_>,
) -> Mac {
    let (flags, route) = match coverage {
        ReplyCoverage::Payload(r) => (0u8, r),
        ReplyCoverage::SourceRoute(r) => (Flags::EMPTY_PAYLOAD, r),
    };
    let mut buf = Vec::with_capacity(16 + 4 * route.len());
    buf.push(PacketType::Reply as u8);
    buf.push(flags);
    buf.extend_from_slice(&source.0.to_be_bytes());
    buf.extend_from_slice(&target.0.to_be_bytes());
    buf.extend_from_slice(&qseq.to_be_bytes());
    buf.extend_from_slice(&qid.to_be_bytes());
    buf.push(route.len().min(u8::MAX as usize) as u8);
    for n in route {
        buf.extend_from_slice(&n.0.to_be_bytes());
    }
    keyed_hash(alg, key, &buf)
}

/// Same construction as [`request_mac`] under the group key.
pub fn inrt_token(alg: MacAlgorithm, group_key: &Key, source: NodeId, target: NodeId, qseq: u16, qid: u32) -> Token {
    request_mac(alg, group_key, source, target, qseq, qid)
}

/// Constant-time equality.
pub fn verify_mac(expected: &Mac, computed: &Mac) -> bool {
    expected.ct_eq(computed).into()
}

pub fn parse_key(hex_key: &str) -> Result<Key, CryptoError> {
    let bytes = hex::decode(hex_key).map_err(|e| CryptoError::BadKey(e.to_string()))?;
    bytes
        .try_into()
        .map_err(|v: Vec<u8>| CryptoError::BadKey(format!("expected 16 bytes, got {}", v.len())))
}

/// Shared secret between two end nodes plus the replay counters each side
/// keeps for it. One instance lives in each of the two nodes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SecurityAssociation {
    pub self_id: NodeId,
    pub peer_id: NodeId,
    pub key: Key,
    /// Next qseq to issue when `self_id` queries `peer_id`.
    pub next_qseq: u16,
    /// Highest qseq validated from `peer_id`.
    pub smax: u16,
    pub persistent: bool,
}

impl SecurityAssociation {
    pub fn new(self_id: NodeId, peer_id: NodeId, key: Key, persistent: bool) -> Self {
        SecurityAssociation { self_id, peer_id, key, next_qseq: 1, smax: 0, persistent }
    }

    /// Hands out the next (qseq, qid) pair.
    pub fn next_query_ids<R: Rng + ?Sized>(&mut self, rng: &mut R, mode: QidMode) -> Result<(u16, u32), CryptoError> {
        if self.next_qseq == u16::MAX {
            return Err(CryptoError::SaExhausted(self.self_id, self.peer_id));
        }
        let qseq = self.next_qseq;
        let qid = match mode {
            QidMode::Random => rng.random::<u32>(),
            QidMode::Sequential => u32::from(qseq),
        };
        self.next_qseq += 1;
        Ok((qseq, qid))
    }

    /// Raises smax; never lowers it.
    pub fn record_valid(&mut self, qseq: u16) {
        self.smax = self.smax.max(qseq);
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupKey {
    pub group_id: String,
    pub key: Key,
    pub members: BTreeSet<NodeId>,
}

impl GroupKey {
    pub fn is_member(&self, node: NodeId) -> bool {
        self.members.contains(&node)
    }
}

/// Issues and checks intermediate node reply tokens.
pub trait InrtScheme: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &'static str;
    fn issue(&self, source: NodeId, target: NodeId, qseq: u16, qid: u32) -> Result<Token, CryptoError>;
    fn verify(&self, token: &Token, source: NodeId, target: NodeId, qseq: u16, qid: u32) -> Result<bool, CryptoError>;
}

/// Token keyed with a group secret.
#[derive(Debug, Clone)]
pub struct GroupKeyedInrt {
    pub alg: MacAlgorithm,
    pub group: GroupKey,
}

impl InrtScheme for GroupKeyedInrt {
    fn name(&self) -> &'static str {
        "group-key"
    }

    fn issue(&self, source: NodeId, target: NodeId, qseq: u16, qid: u32) -> Result<Token, CryptoError> {
        Ok(inrt_token(self.alg, &self.group.key, source, target, qseq, qid))
    }

    fn verify(&self, token: &Token, source: NodeId, target: NodeId, qseq: u16, qid: u32) -> Result<bool, CryptoError> {
        Ok(verify_mac(token, &inrt_token(self.alg, &self.group.key, source, target, qseq, qid)))
    }
}

/// Signature-based token. Needs a key infrastructure this crate does not model.
#[derive(Debug, Clone, Default)]
pub struct SignatureInrt;

impl InrtScheme for SignatureInrt {
    fn name(&self) -> &'static str {
        "signature"
    }

    fn issue(&self, _: NodeId, _: NodeId, _: u16, _: u32) -> Result<Token, CryptoError> {
        Err(CryptoError::Unsupported("signature-based INRT"))
    }

    fn verify(&self, _: &Token, _: NodeId, _: NodeId, _: u16, _: u32) -> Result<bool, CryptoError> {
        Err(CryptoError::Unsupported("signature-based INRT"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const K: Key = [0x11; 16];

    fn n(v: u32) -> NodeId {
        NodeId(v)
    }

    #[test]
    fn rfc2104_md5_vector() {
        let mac = keyed_hash(MacAlgorithm::HmacMd5, &[0x0b; 16], b"Hi There");
        assert_eq!(hex::encode(mac), "9294727a3638bb1c13f48ef8158bfc9d");
    }

    #[test]
    fn rfc2104_md5_vector_short_key() {
        let mac = keyed_hash(MacAlgorithm::HmacMd5, b"Jefe", b"what do ya want for nothing?");
        assert_eq!(hex::encode(mac), "750c783e6ab0b503eaa86e310a5db738");
    }

    #[test]
    fn rfc2202_sha1_vector_truncated() {
        let mac = keyed_hash(MacAlgorithm::HmacSha1, &[0x0b; 20], b"Hi There");
        assert_eq!(hex::encode(mac), "b617318655057264e28bc0b6fb378c8e");
    }

    #[test]
    fn request_mac_is_deterministic() {
        let a = request_mac(MacAlgorithm::HmacMd5, &K, n(100), n(200), 1, 42);
        let b = request_mac(MacAlgorithm::HmacMd5, &K, n(100), n(200), 1, 42);
        assert_eq!(a, b);
        let c = request_mac(MacAlgorithm::HmacSha1, &K, n(100), n(200), 1, 42);
        assert_ne!(a, c);
    }

    #[test]
    fn tampered_reply_route_changes_mac() {
        let honest: Vec<_> = [100, 1, 101, 5, 4, 200].map(n).to_vec();
        let tampered: Vec<_> = [100, 1, 101, 190, 200].map(n).to_vec();
        let a = reply_mac(MacAlgorithm::HmacMd5, &K, n(100), n(200), 1, 9, ReplyCoverage::Payload(&honest));
        let b = reply_mac(MacAlgorithm::HmacMd5, &K, n(100), n(200), 1, 9, ReplyCoverage::Payload(&tampered));
        assert_ne!(a, b);
    }

    #[test]
    fn reply_modes_cover_different_encodings() {
        let route: Vec<_> = [100, 1, 4, 200].map(n).to_vec();
        let normal = reply_mac(MacAlgorithm::HmacMd5, &K, n(100), n(200), 1, 9, ReplyCoverage::Payload(&route));
        let empty = reply_mac(MacAlgorithm::HmacMd5, &K, n(100), n(200), 1, 9, ReplyCoverage::SourceRoute(&route));
        assert_ne!(normal, empty);
    }

    #[test]
    fn inrt_differs_from_request_mac() {
        let kg: Key = [0x22; 16];
        let token = inrt_token(MacAlgorithm::HmacMd5, &kg, n(100), n(200), 3, 77);
        let mac = request_mac(MacAlgorithm::HmacMd5, &K, n(100), n(200), 3, 77);
        assert_ne!(token, mac);
    }

    #[test]
    fn group_scheme_members_and_outsiders() {
        let group = GroupKey { group_id: "g".into(), key: [0x22; 16], members: [n(100), n(3)].into() };
        let scheme = GroupKeyedInrt { alg: MacAlgorithm::HmacMd5, group: group.clone() };
        let token = scheme.issue(n(100), n(200), 3, 77).unwrap();
        assert!(scheme.verify(&token, n(100), n(200), 3, 77).unwrap());
        let outsider = GroupKeyedInrt {
            alg: MacAlgorithm::HmacMd5,
            group: GroupKey { key: [0x33; 16], ..group },
        };
        assert!(!outsider.verify(&token, n(100), n(200), 3, 77).unwrap());
    }

    #[test]
    fn signature_scheme_is_a_stub() {
        assert!(matches!(SignatureInrt.issue(n(1), n(2), 1, 1), Err(CryptoError::Unsupported(_))));
        assert!(matches!(SignatureInrt.verify(&[0; 16], n(1), n(2), 1, 1), Err(CryptoError::Unsupported(_))));
    }

    #[test]
    fn verify_mac_cases() {
        let a = [7u8; 16];
        let mut b = a;
        assert!(verify_mac(&a, &b));
        b[5] ^= 1;
        assert!(!verify_mac(&a, &b));
        assert!(verify_mac(&[0; 16], &[0; 16]));
    }

    #[test]
    fn qseq_counts_up_and_exhausts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut sa = SecurityAssociation::new(n(100), n(200), K, true);
        assert_eq!(sa.next_query_ids(&mut rng, QidMode::Random).unwrap().0, 1);
        assert_eq!(sa.next_query_ids(&mut rng, QidMode::Random).unwrap().0, 2);
        assert_eq!(sa.next_query_ids(&mut rng, QidMode::Sequential).unwrap(), (3, 3));
        sa.next_qseq = u16::MAX - 1;
        assert!(sa.next_query_ids(&mut rng, QidMode::Random).is_ok());
        assert_eq!(
            sa.next_query_ids(&mut rng, QidMode::Random),
            Err(CryptoError::SaExhausted(n(100), n(200)))
        );
    }

    #[test]
    fn smax_never_decreases() {
        let mut sa = SecurityAssociation::new(n(200), n(100), K, true);
        sa.record_valid(5);
        sa.record_valid(3);
        assert_eq!(sa.smax, 5);
    }

    #[test]
    fn parse_key_checks_length() {
        assert_eq!(parse_key("000102030405060708090a0b0c0d0e0f").unwrap()[15], 0x0f);
        assert!(parse_key("0001").is_err());
        assert!(parse_key("zz").is_err());
    }

    #[test]
    fn mac_counter_advances() {
        let before = mac_operations();
        let _ = request_mac(MacAlgorithm::HmacMd5, &K, n(1), n(2), 1, 1);
        assert_eq!(mac_operations(), before + 1);
    }
}
