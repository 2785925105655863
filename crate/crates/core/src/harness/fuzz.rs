use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::*;

fn route<R: Rng>(rng: &mut R, max: usize) -> Vec<NodeId> {
    let n = rng.random_range(0..=max);
    (0..n).map(|_| NodeId(rng.random_range(1..=u32::MAX))).collect()
}

fn header<R: Rng>(rng: &mut R, t: PacketType) -> SrpHeader {
    let mut h = SrpHeader::new(t, rng.random(), rng.random());
    rng.fill(&mut h.mac);
    h
}

/// A random well-formed packet.
pub fn random_packet<R: Rng>(rng: &mut R) -> Packet {
    match rng.random_range(0..3) {
        0 => {
            let base = header(rng, PacketType::Request);
            let header = if rng.random_bool(0.3) {
                let mut inrt = [0; TOKEN_LEN];
                rng.fill(&mut inrt);
                RequestHeader::Extended(ExtendedSrpHeader { base: SrpHeader { flags: base.flags.with(Flags::INRT), ..base }, inrt })
            } else {
                RequestHeader::Base(base)
            };
            Packet::Request(RouteRequest {
                header,
                source: NodeId(rng.random()),
                target: NodeId(rng.random()),
                ttl: rng.random(),
                accumulated_route: route(rng, 20),
            })
        }
        1 => {
            let mut h = header(rng, PacketType::Reply);
            let empty = rng.random_bool(0.2);
            if empty {
                h.flags = h.flags.with(Flags::EMPTY_PAYLOAD);
            }
            Packet::Reply(RouteReply {
                header: h,
                source: NodeId(rng.random()),
                target: NodeId(rng.random()),
                replied_route: if empty { Vec::new() } else { route(rng, 20) },
                ip_source_route: route(rng, 20),
                traversed_route: route(rng, 20),
            })
        }
        _ => Packet::Error(RouteError {
            header: header(rng, PacketType::Error),
            reporter: NodeId(rng.random()),
            broken_link: (NodeId(rng.random()), NodeId(rng.random())),
            reported_route: route(rng, 20),
            ip_source_route: route(rng, 20),
            traversed_route: route(rng, 20),
        }),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FuzzStats {
    pub iterations: u64,
    pub decoded: u64,
    pub rejected: u64,
    /// Inputs that decoded but did not re-encode to the same bytes.
    pub non_canonical: u64,
}

/// Feeds `iterations` hostile inputs to the decoder: half uniform noise,
/// half valid encodings with bytes flipped, cut off or appended.
pub fn fuzz_decode(iterations: u64, seed: u64) -> FuzzStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = FuzzStats { iterations, ..FuzzStats::default() };
    for i in 0..iterations {
        let input = if i % 2 == 0 {
            let len = rng.random_range(0..128);
            let mut b = vec![0u8; len];
            rng.fill(&mut b[..]);
            if len > 0 && rng.random_bool(0.5) {
                // Give the type byte a real value often enough to get past it.
                b[0] = rng.random_range(0..=2);
            }
            b
        } else {
            let mut b = encode_packet(&random_packet(&mut rng)).expect("generated packets encode");
            match rng.random_range(0..3) {
                0 => {
                    for _ in 0..rng.random_range(1..4) {
                        let at = rng.random_range(0..b.len());
                        b[at] ^= 1 << rng.random_range(0..8);
                    }
                }
                1 => b.truncate(rng.random_range(0..b.len())),
                _ => b.extend((0..rng.random_range(1..8)).map(|_| rng.random::<u8>())),
            }
            b
        };
        match decode_packet(&input) {
            Ok(pkt) => {
                stats.decoded += 1;
                if encode_packet(&pkt).ok().as_deref() != Some(&input[..]) {
                    stats.non_canonical += 1;
                }
            }
            Err(_) => stats.rejected += 1,
        }
    }
    stats
}
