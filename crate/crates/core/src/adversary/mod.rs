//! Byzantine behaviors. Each profile wraps the benign state machine of the
//! node it is installed on and sees every frame first; it may consume the
//! frame or pass it on.
//!
//! Profiles are created by name through [`AttackRegistry`], which maps the
//! `kind` string of a scenario file to a constructor taking the profile's
//! JSON parameters.

mod profiles;

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use thiserror::Error;

use crate::codec::{Mac, NodeId, RouteRequest};
use crate::crypto::Key;
use crate::node::{Frame, Node, NodeCtx};
use crate::simnet::trace::Direction;

pub use profiles::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    /// Let the benign state machine handle the frame too.
    Pass,
    Consume,
}

pub trait Adversary: Send + std::fmt::Debug {
    fn kind(&self) -> &'static str;

    /// Extra network ids this radio will transmit under.
    fn aliases(&self) -> Vec<NodeId> {
        Vec::new()
    }

    /// Covert-channel partner, for colluding profiles.
    fn tunnel_peer(&self) -> Option<NodeId> {
        None
    }

    fn on_start(&mut self, _ctx: &mut NodeCtx, _node: &mut Node) {}

    fn on_frame(&mut self, ctx: &mut NodeCtx, node: &mut Node, frame: &Frame) -> Verdict;

    fn on_timer(&mut self, _ctx: &mut NodeCtx, _node: &mut Node, _token: u64) {}
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AttackError {
    #[error("unknown attack kind `{0}`")]
    UnknownKind(String),
    #[error("bad parameters for `{kind}`: {msg}")]
    BadParams { kind: String, msg: String },
}

/// What a profile constructor gets to work with.
#[derive(Debug, Clone)]
pub struct AttackSetup<'a> {
    pub node: NodeId,
    pub seed: u64,
    pub params: &'a serde_json::Value,
    /// Keys deliberately handed to this attacker, by unordered end-node pair.
    pub leaked_keys: BTreeMap<(NodeId, NodeId), Key>,
}

impl AttackSetup<'_> {
    pub fn parse<P: DeserializeOwned + Default>(&self, kind: &str) -> Result<P, AttackError> {
        if self.params.is_null() {
            return Ok(P::default());
        }
        serde_json::from_value(self.params.clone())
            .map_err(|e| AttackError::BadParams { kind: kind.to_owned(), msg: e.to_string() })
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed.rotate_left(17) ^ 0x5eed_a77a_c4e5 ^ u64::from(self.node.0))
    }

    pub fn leaked_key(&self, a: NodeId, b: NodeId) -> Option<Key> {
        self.leaked_keys.get(&pair(a, b)).copied()
    }
}

pub fn pair(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

pub type Factory = fn(&AttackSetup) -> Result<Box<dyn Adversary>, AttackError>;

#[derive(Clone)]
pub struct AttackRegistry {
    factories: BTreeMap<&'static str, Factory>,
}

impl AttackRegistry {
    pub fn empty() -> Self {
        AttackRegistry { factories: BTreeMap::new() }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(FabricateReply::KIND, FabricateReply::create);
        r.register(DropRequests::KIND, DropRequests::create);
        r.register(TamperReply::KIND, TamperReply::create);
        r.register(CorruptAccumulatedRoute::KIND, CorruptAccumulatedRoute::create);
        r.register(ReplayRequest::KIND, ReplayRequest::create);
        r.register(FloodPredictedQids::KIND, FloodPredictedQids::create);
        r.register(SpoofRelay::KIND, SpoofRelay::create);
        r.register(MultiSpoofReplies::KIND, MultiSpoofReplies::create);
        r.register(FabricateRouteError::KIND, FabricateRouteError::create);
        r.register(ColludeTunnel::KIND, ColludeTunnel::create);
        r.register(QueryFlood::KIND, QueryFlood::create);
        r
    }

    pub fn register(&mut self, kind: &'static str, f: Factory) {
        self.factories.insert(kind, f);
    }

    pub fn kinds(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.factories.keys().copied()
    }

    pub fn contains(&self, kind: &str) -> bool {
        self.factories.contains_key(kind)
    }

    pub fn create(&self, kind: &str, setup: &AttackSetup) -> Result<Box<dyn Adversary>, AttackError> {
        let f = self.factories.get(kind).ok_or_else(|| AttackError::UnknownKind(kind.to_owned()))?;
        f(setup)
    }
}

impl Default for AttackRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

/// Uniform random bytes standing in for a MAC the attacker cannot compute.
pub fn garbage_mac<R: RngCore + ?Sized>(rng: &mut R) -> Mac {
    let mut m = [0u8; 16];
    rng.fill_bytes(&mut m);
    m
}

/// Copy of `req` as relayed by `as_id`.
pub fn relayed(req: &RouteRequest, as_id: NodeId) -> RouteRequest {
    let mut r = req.clone();
    r.accumulated_route.push(as_id);
    r.ttl = r.ttl.saturating_sub(1);
    r
}

pub(crate) fn log_attack(ctx: &mut NodeCtx, what: &str) {
    let r = ctx.record(Direction::Tx, "attack").reason(what);
    ctx.log(r);
}

pub(crate) fn random_id<R: Rng + ?Sized>(rng: &mut R) -> NodeId {
    // Far above any id a scenario uses.
    NodeId(rng.random_range(1_000_000..u32::MAX))
}
