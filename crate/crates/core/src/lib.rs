//! Byzantine fault detection over a virtual token ring.
//!
//! The ring's token holder challenges every node with a deterministic
//! matrix computation, scores the answers against the median, and hands the
//! updated reliability table to its successor. The modules here cover the
//! wire format, the challenge, the scoring rules, the per-node state
//! machine, a deterministic discrete-event simulator with fault injection,
//! scenario files, and a reference implementation of Lamport's OM(m).

pub mod challenge;
pub mod om;
pub mod protocol;
pub mod reliability;
pub mod scenario;
pub mod simnet;
pub mod wire;
