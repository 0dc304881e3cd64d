//! Safety checking: invariant monitors, bounded state-space exploration,
//! and a linearizability checker for client histories.

pub mod explore;
pub mod invariants;
pub mod linearizability;

pub use explore::{ExplorationBounds, ExploreReport, Explorer, ScriptedOp};
pub use invariants::{DurabilityRule, SafetyMonitor, Violation, ViolationKind};
pub use linearizability::{check_linearizable, check_records, HistoryOp, OpKind, Witness};
