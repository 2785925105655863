//! Secure route discovery for ad hoc networks: packet codec, key material,
//! node state machines, Byzantine behaviors and a deterministic
//! discrete-event simulator to run them against each other.

#[macro_use]
mod macros;

pub mod adversary;
pub mod codec;
pub mod crypto;
pub mod harness;
pub mod node;
pub mod simnet;
