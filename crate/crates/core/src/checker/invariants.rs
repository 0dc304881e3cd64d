//! Safety monitors evaluated over snapshots of every node.

use std::collections::{btree_map, BTreeMap};
use std::fmt;
use std::hash::{DefaultHasher, Hash, Hasher};

use serde::Serialize;

use crate::protocol::{LeaderClaim, NodeView};
use crate::types::{majority, ClusterTopology, Command, DomainId, KvStore, LogEntry, LogIndex, NodeId, RequestTag, Term};

/// When an entry counts as durable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DurabilityRule {
    /// Majorities of the committing leader's domain and of one more domain.
    TwoDomain,
    /// A majority of all nodes.
    GlobalMajority,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum ViolationKind {
    ElectionSafety,
    LogMatching,
    Durability,
    Monotonicity,
    LeaderCompleteness,
    StateMachine,
    UnsafeResponse,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.kind, self.detail)
    }
}

fn violation(kind: ViolationKind, detail: String) -> Violation {
    Violation { kind, detail }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
struct NodeMarks {
    commit: LogIndex,
    apply: LogIndex,
    /// In-domain commit index and the leadership term it belongs to.
    in_domain: Option<(Term, LogIndex)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct CommittedEntry {
    entry: LogEntry,
    /// Leadership term of the node that first committed it.
    commit_term: Term,
}

/// Ghost state accumulated across observations.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SafetyMonitor {
    topology: ClusterTopology,
    rule: DurabilityRule,
    check_state_machine: bool,
    leaders: BTreeMap<LeaderClaim, NodeId>,
    committed: BTreeMap<LogIndex, CommittedEntry>,
    marks: BTreeMap<NodeId, NodeMarks>,
    /// Prefix hash of every `(index, term)` position seen, and who held it
    /// first.
    positions: BTreeMap<(LogIndex, Term), (u64, NodeId)>,
}

/// `past(holder, observer, entry)`: whether `holder`'s copy of `entry`
/// happens before the current step of `observer`. Both are positions in the
/// view slice.
pub type Past<'a> = Option<&'a dyn Fn(usize, usize, &LogEntry) -> bool>;

fn holds(view: &NodeView<'_>, e: &LogEntry) -> bool {
    view.log.get(e.index).is_some_and(|x| x.term == e.term)
}

impl SafetyMonitor {
    pub fn new(topology: ClusterTopology, rule: DurabilityRule) -> Self {
        Self {
            topology,
            rule,
            check_state_machine: false,
            leaders: BTreeMap::new(),
            committed: BTreeMap::new(),
            marks: BTreeMap::new(),
            positions: BTreeMap::new(),
        }
    }

    /// Also recompute every node's key-value state from its log on each
    /// observation.
    pub fn with_state_machine_check(mut self) -> Self {
        self.check_state_machine = true;
        self
    }

    pub fn committed_len(&self) -> usize {
        self.committed.len()
    }

    /// True if `e` is durable under the rule, counting only copies that
    /// `observer` may rely on; `leader_domain` names the committing leader's
    /// domain when known.
    fn durable_for(&self, views: &[NodeView<'_>], e: &LogEntry, leader_domain: Option<DomainId>, observer: usize, past: Past<'_>) -> bool {
        let counted = |i: usize| holds(&views[i], e) && past.is_none_or(|f| i == observer || f(i, observer, e));
        match self.rule {
            DurabilityRule::GlobalMajority => {
                let n = (0..views.len()).filter(|&i| counted(i)).count();
                n >= majority(self.topology.total_nodes())
            }
            DurabilityRule::TwoDomain => {
                let ds: Vec<DomainId> = self
                    .topology
                    .domains()
                    .filter(|&d| {
                        let n = (0..views.len()).filter(|&i| views[i].id.domain == d && counted(i)).count();
                        n >= majority(self.topology.nodes_in(d) as usize)
                    })
                    .collect();
                ds.len() >= 2 && leader_domain.is_none_or(|l| ds.contains(&l))
            }
        }
    }

    /// True if `e` is durable in the snapshot.
    pub fn is_durable(&self, views: &[NodeView<'_>], e: &LogEntry, leader_domain: Option<DomainId>) -> bool {
        self.durable_for(views, e, leader_domain, 0, None)
    }

    /// Checks a write acknowledgment sent by `views[responder]`: some entry
    /// carrying `tag` must already be durable.
    pub fn check_write_response(&self, views: &[NodeView<'_>], tag: RequestTag, responder: usize) -> Option<Violation> {
        self.check_write_response_causal(views, tag, responder, None)
    }

    /// As [`Self::check_write_response`], counting only copies in the
    /// responder's causal past.
    pub fn check_write_response_causal(&self, views: &[NodeView<'_>], tag: RequestTag, responder: usize, past: Past<'_>) -> Option<Violation> {
        let mut candidates: Vec<&LogEntry> =
            views.iter().flat_map(|v| v.log.entries()).filter(|e| e.request == Some(tag)).collect();
        candidates.sort();
        candidates.dedup();
        if candidates.iter().any(|e| self.durable_for(views, e, None, responder, past)) {
            None
        } else {
            Some(violation(
                ViolationKind::UnsafeResponse,
                format!("write {tag} acknowledged by {} before it was durable", views[responder].id),
            ))
        }
    }

    /// Checks every invariant against one consistent snapshot.
    pub fn observe(&mut self, views: &[NodeView<'_>]) -> Vec<Violation> {
        self.observe_causal(views, None)
    }

    /// As [`Self::observe`], but a commit is judged durable only by copies
    /// in the committing node's causal past, as decided by `past`.
    pub fn observe_causal(&mut self, views: &[NodeView<'_>], past: Past<'_>) -> Vec<Violation> {
        let mut out = Vec::new();
        self.check_claims(views, &mut out);
        self.check_log_matching(views, &mut out);
        self.check_commits(views, past, &mut out);
        self.check_completeness(views, &mut out);
        if self.check_state_machine {
            check_state_machines(views, &mut out);
        }
        out
    }

    fn check_claims(&mut self, views: &[NodeView<'_>], out: &mut Vec<Violation>) {
        for v in views {
            for &c in &v.claims {
                let holder = *self.leaders.entry(c).or_insert(v.id);
                if holder != v.id {
                    out.push(violation(ViolationKind::ElectionSafety, format!("{c:?} claimed by both {holder} and {}", v.id)));
                }
            }
        }
    }

    /// Every `(index, term)` pair ever observed must name one entry with one
    /// prefix, across nodes and across time.
    fn check_log_matching(&mut self, views: &[NodeView<'_>], out: &mut Vec<Violation>) {
        for v in views {
            let mut chain = 0u64;
            for e in v.log.entries() {
                let mut h = DefaultHasher::new();
                (chain, e).hash(&mut h);
                chain = h.finish();
                match self.positions.entry((e.index, e.term)) {
                    btree_map::Entry::Vacant(slot) => {
                        slot.insert((chain, v.id));
                    }
                    btree_map::Entry::Occupied(seen) if seen.get().0 != chain => {
                        out.push(violation(
                            ViolationKind::LogMatching,
                            format!(
                                "{} and {} hold index {} of term {} with different entries or prefixes",
                                seen.get().1,
                                v.id,
                                e.index,
                                e.term
                            ),
                        ));
                        break;
                    }
                    btree_map::Entry::Occupied(_) => {}
                }
            }
        }
    }

    fn check_commits(&mut self, views: &[NodeView<'_>], past: Past<'_>, out: &mut Vec<Violation>) {
        for (c, v) in views.iter().enumerate() {
            let leader_term = v.claims.iter().find_map(|c| match c {
                LeaderClaim::Global { term } => Some(*term),
                LeaderClaim::Domain { .. } => None,
            });
            let marks = self.marks.entry(v.id).or_default();
            if v.commit_index < marks.commit || v.apply_index < marks.apply {
                out.push(violation(
                    ViolationKind::Monotonicity,
                    format!(
                        "{}: commit {}->{} apply {}->{}",
                        v.id, marks.commit, v.commit_index, marks.apply, v.apply_index
                    ),
                ));
            }
            if v.apply_index > v.commit_index || v.commit_index > v.log.last_index() {
                out.push(violation(
                    ViolationKind::Monotonicity,
                    format!("{}: apply {} commit {} last {}", v.id, v.apply_index, v.commit_index, v.log.last_index()),
                ));
            }
            match (leader_term, v.in_domain_commit, marks.in_domain) {
                (Some(t), Some(idc), Some((pt, prev))) if t == pt && idc < prev => out.push(violation(
                    ViolationKind::Monotonicity,
                    format!("{}: in-domain commit {prev}->{idc} in term {t}", v.id),
                )),
                _ => {}
            }
            marks.in_domain = leader_term.zip(v.in_domain_commit);
            if leader_term.is_some() {
                if let Some(idc) = v.in_domain_commit {
                    if v.commit_index > idc {
                        out.push(violation(
                            ViolationKind::Monotonicity,
                            format!("{}: commit {} above in-domain commit {idc}", v.id, v.commit_index),
                        ));
                    }
                }
            }
            marks.commit = marks.commit.max(v.commit_index);
            marks.apply = marks.apply.max(v.apply_index);

            for k in 1..=v.commit_index {
                let Some(e) = v.log.get(k) else { break };
                match self.committed.get(&k) {
                    Some(c) if c.entry != *e => out.push(violation(
                        ViolationKind::Durability,
                        format!("{} committed a different entry at {k} than was committed before", v.id),
                    )),
                    Some(_) => {}
                    None => {
                        if !self.durable_for(views, e, leader_term.map(|_| v.id.domain), c, past) {
                            out.push(violation(
                                ViolationKind::Durability,
                                format!("{} committed index {k} (term {}) without the required majorities", v.id, e.term),
                            ));
                        }
                        let commit_term = leader_term.unwrap_or(0);
                        self.committed.insert(k, CommittedEntry { entry: e.clone(), commit_term });
                    }
                }
            }
        }
    }

    fn check_completeness(&self, views: &[NodeView<'_>], out: &mut Vec<Violation>) {
        for v in views {
            for c in &v.claims {
                let LeaderClaim::Global { term } = *c else { continue };
                if let Some((k, _)) = self.committed.iter().find(|(_, c)| c.commit_term < term && !holds(v, &c.entry)) {
                    out.push(violation(
                        ViolationKind::LeaderCompleteness,
                        format!("leader {} of term {term} lacks committed index {k}", v.id),
                    ));
                }
            }
        }
    }
}

fn check_state_machines(views: &[NodeView<'_>], out: &mut Vec<Violation>) {
    for v in views {
        let mut kv = KvStore::new();
        for e in v.log.entries().iter().take(v.apply_index as usize) {
            if let Command::Put { key, value } = &e.command {
                kv.insert(key.clone(), value.clone());
            }
        }
        if kv != *v.kv {
            out.push(violation(ViolationKind::StateMachine, format!("{}: state differs from its applied log", v.id)));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ReplicatedLog;

    fn log_with(terms: &[Term]) -> ReplicatedLog {
        let mut log = ReplicatedLog::new();
        for &t in terms {
            log.push(t, Command::NoOp, DomainId(1), None);
        }
        log
    }

    fn view<'a>(id: NodeId, log: &'a ReplicatedLog, commit: LogIndex, kv: &'a KvStore, claims: Vec<LeaderClaim>) -> NodeView<'a> {
        NodeView { id, log, commit_index: commit, apply_index: 0, in_domain_commit: None, kv, claims, serving: false }
    }

    #[test]
    fn two_leaders_in_one_term_flagged() {
        let topo = ClusterTopology::uniform(2, 1).unwrap();
        let mut m = SafetyMonitor::new(topo, DurabilityRule::TwoDomain);
        let log = ReplicatedLog::new();
        let kv = KvStore::new();
        let claim = vec![LeaderClaim::Global { term: 3 }];
        let views = [view(NodeId::new(1, 0), &log, 0, &kv, claim.clone()), view(NodeId::new(2, 0), &log, 0, &kv, claim)];
        let v = m.observe(&views);
        assert!(v.iter().any(|x| x.kind == ViolationKind::ElectionSafety));
        // The claim is remembered after the first holder steps down.
        let later = [view(NodeId::new(2, 0), &log, 0, &kv, vec![LeaderClaim::Global { term: 3 }])];
        let mut fresh = SafetyMonitor::new(ClusterTopology::uniform(2, 1).unwrap(), DurabilityRule::TwoDomain);
        assert!(fresh.observe(&views[..1]).is_empty());
        assert!(fresh.observe(&later).iter().any(|x| x.kind == ViolationKind::ElectionSafety));
    }

    #[test]
    fn commit_on_one_domain_is_not_durable() {
        let topo = ClusterTopology::uniform(2, 3).unwrap();
        let mut m = SafetyMonitor::new(topo.clone(), DurabilityRule::TwoDomain);
        let full = log_with(&[1]);
        let empty = ReplicatedLog::new();
        let kv = KvStore::new();
        let mut views = Vec::new();
        for id in topo.all_nodes() {
            let log = if id.domain == DomainId(1) { &full } else { &empty };
            let commit = u64::from(id == NodeId::new(1, 0));
            views.push(view(id, log, commit, &kv, Vec::new()));
        }
        let v = m.observe(&views);
        assert!(v.iter().any(|x| x.kind == ViolationKind::Durability), "{v:?}");
    }

    #[test]
    fn divergent_prefix_breaks_log_matching() {
        let topo = ClusterTopology::uniform(2, 1).unwrap();
        let mut m = SafetyMonitor::new(topo, DurabilityRule::TwoDomain);
        let mut a = ReplicatedLog::new();
        a.push(1, Command::NoOp, DomainId(1), None);
        a.push(2, Command::NoOp, DomainId(1), None);
        let mut b = ReplicatedLog::new();
        b.push(1, Command::NoOp, DomainId(2), None);
        b.push(2, Command::NoOp, DomainId(1), None);
        let kv = KvStore::new();
        let views = [view(NodeId::new(1, 0), &a, 0, &kv, Vec::new()), view(NodeId::new(2, 0), &b, 0, &kv, Vec::new())];
        assert!(m.observe(&views).iter().any(|x| x.kind == ViolationKind::LogMatching));
    }

    #[test]
    fn log_matching_spans_time() {
        let topo = ClusterTopology::uniform(2, 1).unwrap();
        let mut m = SafetyMonitor::new(topo, DurabilityRule::TwoDomain);
        let mut a = ReplicatedLog::new();
        a.push(1, Command::NoOp, DomainId(1), None);
        let mut b = ReplicatedLog::new();
        b.push(1, Command::NoOp, DomainId(2), None);
        let kv = KvStore::new();
        assert!(m.observe(&[view(NodeId::new(1, 0), &a, 0, &kv, Vec::new())]).is_empty());
        let v = m.observe(&[view(NodeId::new(2, 0), &b, 0, &kv, Vec::new())]);
        assert!(v.iter().any(|x| x.kind == ViolationKind::LogMatching));
    }

    #[test]
    fn commit_regression_flagged() {
        let topo = ClusterTopology::uniform(2, 1).unwrap();
        let mut m = SafetyMonitor::new(topo, DurabilityRule::TwoDomain);
        let log = log_with(&[1]);
        let kv = KvStore::new();
        let ok = [view(NodeId::new(1, 0), &log, 1, &kv, Vec::new()), view(NodeId::new(2, 0), &log, 1, &kv, Vec::new())];
        assert!(m.observe(&ok).is_empty());
        let back = [view(NodeId::new(1, 0), &log, 0, &kv, Vec::new()), view(NodeId::new(2, 0), &log, 1, &kv, Vec::new())];
        assert!(m.observe(&back).iter().any(|x| x.kind == ViolationKind::Monotonicity));
    }
}
