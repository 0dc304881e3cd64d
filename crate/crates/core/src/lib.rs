//! Cross-domain Raft (CD-Raft) and a plain Raft baseline, with the tools to
//! study them: a deterministic discrete-event network simulator, a YCSB-style
//! workload generator, the cross-domain latency model used for global leader
//! placement, and a bounded model checker with a linearizability checker.

pub mod cdraft;
pub mod checker;
pub mod error;
pub mod harness;
pub mod placement;
pub mod protocol;
pub mod raft;
pub mod simnet;
pub mod types;
pub mod workload;
