//! Bounded model checking entry points shared by the CLI and tests.

use std::sync::Arc;

use bytes::Bytes;
use serde::Serialize;

use crate::cdraft::{self, CdConfig, CommitRule};
use crate::checker::{DurabilityRule, ExplorationBounds, ExploreReport, Explorer, ScriptedOp};
use crate::error::{ConfigError, TraceError};
use crate::protocol::{ClientOp, ProtocolNode};
use crate::raft::{self, RaftConfig};
use crate::simnet::TraceRecord;
use crate::checker::Violation;
use crate::types::{ClientId, ClusterTopology, DomainId, NodeId, SimTime};

use super::scenario::Protocol;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckSpec {
    pub protocol: Protocol,
    pub domains: usize,
    pub nodes_per_domain: u16,
    /// Client writes to one key, alternating between domain 2 and domain 1.
    pub ops: usize,
    pub bounds: ExplorationBounds,
    /// Commit on a majority of the leader's domain alone (CD-Raft only).
    pub mutate_commit_rule: bool,
}

impl Default for CheckSpec {
    fn default() -> Self {
        Self {
            protocol: Protocol::Cdraft,
            domains: 3,
            nodes_per_domain: 3,
            ops: 2,
            bounds: ExplorationBounds::default(),
            mutate_commit_rule: false,
        }
    }
}

/// The write script: `ops` puts to key `x`, all sent to `n1.0`.
pub fn scripted_writes(ops: usize) -> Vec<ScriptedOp> {
    (0..ops)
        .map(|i| ScriptedOp {
            client: ClientId { domain: DomainId(if i % 2 == 0 { 2 } else { 1 }), ordinal: 0 },
            target: NodeId::new(1, 0),
            op: ClientOp::Put { key: Bytes::from_static(b"x"), value: Bytes::from(format!("v{}", i + 1)) },
        })
        .collect()
}

impl CheckSpec {
    fn validate(&self) -> Result<ClusterTopology, ConfigError> {
        let topo = ClusterTopology::uniform(self.domains, self.nodes_per_domain)?;
        if self.mutate_commit_rule && self.protocol == Protocol::Raft {
            return Err(ConfigError::Invalid("the commit-rule mutation applies to cdraft only".into()));
        }
        if self.ops > 1 && self.domains < 2 {
            return Err(ConfigError::Invalid("scripted operations need domains 1 and 2".into()));
        }
        Ok(topo)
    }

    fn with<R>(&self, f: impl FnOnce(&dyn Checkable) -> R) -> Result<R, ConfigError> {
        let topo = self.validate()?;
        let ops = scripted_writes(self.ops);
        Ok(match self.protocol {
            Protocol::Cdraft => {
                let mut cfg = CdConfig::new(topo.clone());
                if self.mutate_commit_rule {
                    cfg.commit_rule = CommitRule::LeaderDomainOnly;
                }
                let nodes = cdraft::bootstrap(Arc::new(cfg), DomainId(1), SimTime::ZERO);
                f(&Explorer::new(nodes, topo, DurabilityRule::TwoDomain, ops, self.bounds))
            }
            Protocol::Raft => {
                let nodes = raft::bootstrap(Arc::new(RaftConfig::new(topo.clone())), DomainId(1), SimTime::ZERO);
                f(&Explorer::new(nodes, topo, DurabilityRule::GlobalMajority, ops, self.bounds))
            }
        })
    }

    pub fn explore(&self) -> Result<ExploreReport, ConfigError> {
        self.with(|e| e.explore())
    }

    /// Re-executes a schedule and returns the violations it reaches.
    pub fn replay(&self, schedule: &[TraceRecord]) -> Result<Result<Vec<Violation>, TraceError>, ConfigError> {
        self.with(|e| e.replay(schedule))
    }
}

trait Checkable {
    fn explore(&self) -> ExploreReport;
    fn replay(&self, schedule: &[TraceRecord]) -> Result<Vec<Violation>, TraceError>;
}

impl<N: ProtocolNode> Checkable for Explorer<N> {
    fn explore(&self) -> ExploreReport {
        Explorer::explore(self)
    }

    fn replay(&self, schedule: &[TraceRecord]) -> Result<Vec<Violation>, TraceError> {
        Explorer::replay(self, schedule)
    }
}

/// Result of exploring depth 1, 2, ... under a shared step budget.
#[derive(Clone, Debug, Serialize)]
pub struct DeepeningReport {
    /// Deepest bound explored to completion.
    pub complete_depth: usize,
    pub states_visited: u64,
    pub violations: Vec<Violation>,
    /// Counterexample of the first violation, as trace text.
    pub counterexample: String,
    /// The last exploration hit the budget.
    pub truncated: bool,
}

/// Iterative deepening up to `spec.bounds.max_depth`, spending at most
/// `spec.bounds.max_states` steps in total. Stops at the first violation.
pub fn deepen(spec: &CheckSpec) -> Result<DeepeningReport, ConfigError> {
    let budget = spec.bounds.max_states;
    let mut out = DeepeningReport { complete_depth: 0, states_visited: 0, violations: Vec::new(), counterexample: String::new(), truncated: false };
    for depth in 1..=spec.bounds.max_depth {
        let remaining = budget.saturating_sub(out.states_visited as usize);
        if remaining == 0 {
            out.truncated = true;
            break;
        }
        let mut level = spec.clone();
        level.bounds.max_depth = depth;
        level.bounds.max_states = remaining;
        let r = level.explore()?;
        out.states_visited += r.states_visited;
        if !r.is_clean() {
            out.counterexample = r.counterexample_text();
            out.violations = r.violations;
            break;
        }
        if r.truncated {
            out.truncated = true;
            break;
        }
        out.complete_depth = depth;
        if r.deepest < depth {
            // Nothing is enabled beyond this depth; deeper bounds add nothing.
            out.complete_depth = spec.bounds.max_depth;
            break;
        }
    }
    Ok(out)
}
