//! Shared vocabulary: identifiers, log entries, topology, latencies and
//! quorum arithmetic used by every protocol and tool in the crate.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Sub};

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// A monotone election term (domain or global tier).
pub type Term = u64;

/// A 1-based log position. Index 0 means "before the first entry".
pub type LogIndex = u64;

/// Simulated time in microseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub fn from_millis_f64(ms: f64) -> SimTime {
        SimTime((ms * 1000.0).round().max(0.0) as u64)
    }

    pub fn from_millis(ms: u64) -> SimTime {
        SimTime(ms * 1000)
    }

    pub fn as_millis_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }

    pub fn mul(self, k: u64) -> SimTime {
        SimTime(self.0.saturating_mul(k))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_add(rhs.0))
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}ms", self.as_millis_f64())
    }
}

/// A domain (geographic site). Indexes are 1-based, in `[1, N]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DomainId(pub u16);

impl DomainId {
    /// Zero-based position, for indexing dense tables.
    pub fn slot(self) -> usize {
        self.0 as usize - 1
    }

    pub fn from_slot(slot: usize) -> DomainId {
        DomainId(slot as u16 + 1)
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "d{}", self.0)
    }
}

/// A server node: its domain plus its position inside that domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId {
    pub domain: DomainId,
    pub ordinal: u16,
}

impl NodeId {
    pub fn new(domain: u16, ordinal: u16) -> NodeId {
        NodeId { domain: DomainId(domain), ordinal }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}.{}", self.domain.0, self.ordinal)
    }
}

/// A client process; clients live in a domain like servers do.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClientId {
    pub domain: DomainId,
    pub ordinal: u16,
}

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}.{}", self.domain.0, self.ordinal)
    }
}

/// Anything that can send or receive an envelope.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Addr {
    Node(NodeId),
    Client(ClientId),
}

impl Addr {
    pub fn domain(self) -> DomainId {
        match self {
            Addr::Node(n) => n.domain,
            Addr::Client(c) => c.domain,
        }
    }

    pub fn node(self) -> Option<NodeId> {
        match self {
            Addr::Node(n) => Some(n),
            Addr::Client(_) => None,
        }
    }
}

impl From<NodeId> for Addr {
    fn from(n: NodeId) -> Addr {
        Addr::Node(n)
    }
}

impl From<ClientId> for Addr {
    fn from(c: ClientId) -> Addr {
        Addr::Client(c)
    }
}

impl fmt::Display for Addr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Addr::Node(n) => n.fmt(f),
            Addr::Client(c) => c.fmt(f),
        }
    }
}

/// Identifies one logical client request across retries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RequestTag {
    pub client: ClientId,
    pub req_id: u64,
}

impl fmt::Display for RequestTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.client, self.req_id)
    }
}

/// A replicated state-machine command.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Command {
    Put { key: Bytes, value: Bytes },
    NoOp,
}

/// One entry of the replicated log.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LogEntry {
    /// The term of the leader that created the entry (the global term under
    /// CD-Raft).
    pub term: Term,
    pub index: LogIndex,
    pub command: Command,
    /// Domain of the client that issued the command; the no-op written by a
    /// fresh leader carries the leader's own domain.
    pub origin_domain: DomainId,
    pub request: Option<RequestTag>,
}

impl LogEntry {
    pub fn approx_size(&self) -> usize {
        match &self.command {
            Command::Put { key, value } => 32 + key.len() + value.len(),
            Command::NoOp => 32,
        }
    }
}

/// Gap-free, 1-based ordered log. Terms are non-decreasing along the log.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct ReplicatedLog {
    entries: Vec<LogEntry>,
}

impl ReplicatedLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn last_index(&self) -> LogIndex {
        self.entries.len() as LogIndex
    }

    pub fn last_term(&self) -> Term {
        self.entries.last().map_or(0, |e| e.term)
    }

    /// `(lastTerm, lastIndex)`, the key used by the up-to-date comparison.
    pub fn last_position(&self) -> (Term, LogIndex) {
        (self.last_term(), self.last_index())
    }

    /// Term at `index`; 0 for index 0, `None` past the end.
    pub fn term_at(&self, index: LogIndex) -> Option<Term> {
        if index == 0 {
            return Some(0);
        }
        self.entries.get(index as usize - 1).map(|e| e.term)
    }

    pub fn get(&self, index: LogIndex) -> Option<&LogEntry> {
        if index == 0 {
            return None;
        }
        self.entries.get(index as usize - 1)
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    /// Entries in `from..=last`, cloned (cheap: payloads are ref-counted).
    pub fn slice_from(&self, from: LogIndex) -> Vec<LogEntry> {
        let start = from.max(1) as usize - 1;
        self.entries.get(start..).map(<[_]>::to_vec).unwrap_or_default()
    }

    /// Appends a new entry at `last_index() + 1`.
    pub fn push(&mut self, term: Term, command: Command, origin_domain: DomainId, request: Option<RequestTag>) -> LogIndex {
        debug_assert!(term >= self.last_term());
        let index = self.last_index() + 1;
        self.entries.push(LogEntry { term, index, command, origin_domain, request });
        index
    }

    /// True if the log contains an entry at `index` with term `term`
    /// (index 0 always matches).
    pub fn matches(&self, index: LogIndex, term: Term) -> bool {
        self.term_at(index) == Some(term)
    }

    /// Merges `entries` (which must start at `prev + 1`) following the usual
    /// Raft rule: existing entries are kept until the first term conflict,
    /// from which point the local suffix is replaced. Returns the index of the
    /// first removed entry if a suffix was truncated.
    pub fn merge(&mut self, entries: &[LogEntry]) -> Option<LogIndex> {
        let mut truncated = None;
        for entry in entries {
            match self.term_at(entry.index) {
                Some(t) if t == entry.term => continue,
                Some(_) => {
                    self.entries.truncate(entry.index as usize - 1);
                    truncated.get_or_insert(entry.index);
                    self.entries.push(entry.clone());
                }
                None => {
                    debug_assert_eq!(entry.index, self.last_index() + 1, "gap in appended entries");
                    self.entries.push(entry.clone());
                }
            }
        }
        truncated
    }
}

/// Cluster membership: domains, their sizes and their availability.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ClusterTopology {
    nodes_per_domain: Vec<u16>,
    available: Vec<bool>,
}

impl ClusterTopology {
    pub fn new(nodes_per_domain: Vec<u16>) -> Result<Self, ConfigError> {
        if nodes_per_domain.len() < 2 {
            return Err(ConfigError::Invalid("a cluster needs at least 2 domains".into()));
        }
        if nodes_per_domain.contains(&0) {
            return Err(ConfigError::Invalid("every domain needs at least one node".into()));
        }
        let available = vec![true; nodes_per_domain.len()];
        Ok(Self { nodes_per_domain, available })
    }

    /// `domains` domains of `nodes` nodes each.
    pub fn uniform(domains: usize, nodes: u16) -> Result<Self, ConfigError> {
        Self::new(vec![nodes; domains])
    }

    pub fn with_unavailable(mut self, domain: DomainId) -> Self {
        self.available[domain.slot()] = false;
        self
    }

    pub fn domain_count(&self) -> usize {
        self.nodes_per_domain.len()
    }

    pub fn domains(&self) -> impl Iterator<Item = DomainId> + '_ {
        (0..self.nodes_per_domain.len()).map(DomainId::from_slot)
    }

    pub fn contains_domain(&self, d: DomainId) -> bool {
        d.0 >= 1 && d.slot() < self.nodes_per_domain.len()
    }

    pub fn nodes_in(&self, d: DomainId) -> u16 {
        self.nodes_per_domain[d.slot()]
    }

    pub fn is_available(&self, d: DomainId) -> bool {
        self.available[d.slot()]
    }

    pub fn availability(&self) -> Vec<bool> {
        self.available.clone()
    }

    pub fn domain_members(&self, d: DomainId) -> impl Iterator<Item = NodeId> {
        (0..self.nodes_in(d)).map(move |ordinal| NodeId { domain: d, ordinal })
    }

    pub fn all_nodes(&self) -> Vec<NodeId> {
        self.domains().flat_map(|d| self.domain_members(d)).collect()
    }

    pub fn total_nodes(&self) -> usize {
        self.nodes_per_domain.iter().map(|&n| n as usize).sum()
    }

    pub fn contains_node(&self, n: NodeId) -> bool {
        self.contains_domain(n.domain) && n.ordinal < self.nodes_in(n.domain)
    }
}

/// Pairwise one-way latencies between domains, in simulated milliseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyMatrix {
    one_way_ms: Vec<Vec<f64>>,
    intra_ms: f64,
}

impl LatencyMatrix {
    /// Builds a matrix from the off-diagonal one-way latencies. Diagonal
    /// values in `one_way_ms` are ignored and replaced by `intra_ms`.
    pub fn new(mut one_way_ms: Vec<Vec<f64>>, intra_ms: f64) -> Result<Self, ConfigError> {
        let n = one_way_ms.len();
        if n < 2 {
            return Err(ConfigError::Invalid("latency matrix needs at least 2 domains".into()));
        }
        if !(intra_ms > 0.0 && intra_ms.is_finite()) {
            return Err(ConfigError::Invalid("intra-domain latency must be positive".into()));
        }
        for (i, row) in one_way_ms.iter_mut().enumerate() {
            if row.len() != n {
                return Err(ConfigError::Invalid(format!("latency row {} has {} columns, expected {n}", i + 1, row.len())));
            }
            row[i] = intra_ms;
        }
        for i in 0..n {
            for j in 0..n {
                let v = one_way_ms[i][j];
                if !(v > 0.0 && v.is_finite()) {
                    return Err(ConfigError::Invalid(format!("latency l{}{} must be positive", i + 1, j + 1)));
                }
                if (v - one_way_ms[j][i]).abs() > 1e-9 {
                    return Err(ConfigError::Invalid(format!("latency matrix not symmetric at ({}, {})", i + 1, j + 1)));
                }
            }
        }
        Ok(Self { one_way_ms, intra_ms })
    }

    /// Every pair of distinct domains `inter_ms` apart.
    pub fn symmetric(domains: usize, inter_ms: f64, intra_ms: f64) -> Result<Self, ConfigError> {
        Self::new(vec![vec![inter_ms; domains]; domains], intra_ms)
    }

    pub fn domain_count(&self) -> usize {
        self.one_way_ms.len()
    }

    /// One-way latency `l_ij` in milliseconds.
    pub fn one_way(&self, i: DomainId, j: DomainId) -> f64 {
        self.one_way_ms[i.slot()][j.slot()]
    }

    pub fn intra(&self) -> f64 {
        self.intra_ms
    }

    pub fn rtt(&self, i: DomainId, j: DomainId) -> f64 {
        2.0 * self.one_way(i, j)
    }

    /// Largest cross-domain round trip from `z`.
    pub fn max_rtt_from(&self, z: DomainId) -> f64 {
        (0..self.domain_count())
            .map(DomainId::from_slot)
            .filter(|&j| j != z)
            .map(|j| self.rtt(z, j))
            .fold(0.0, f64::max)
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.one_way_ms
    }
}

/// Size of a strict majority of `n` members.
pub fn majority(n: usize) -> usize {
    assert!(n >= 1, "majority of an empty group");
    n / 2 + 1
}

/// Which of two logs is more up to date.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Freshness {
    ANewer,
    BNewer,
    Equal,
}

/// Compares `(lastTerm, lastIndex)` pairs: higher term wins, then longer log.
pub fn log_up_to_date(a: (Term, LogIndex), b: (Term, LogIndex)) -> Freshness {
    match a.cmp(&b) {
        Ordering::Greater => Freshness::ANewer,
        Ordering::Less => Freshness::BNewer,
        Ordering::Equal => Freshness::Equal,
    }
}

/// True if a candidate at `candidate` may receive a vote from a voter at
/// `voter` (candidate at least as up to date).
pub fn candidate_is_current(candidate: (Term, LogIndex), voter: (Term, LogIndex)) -> bool {
    log_up_to_date(candidate, voter) != Freshness::BNewer
}

/// The applied key-value state machine.
pub type KvStore = BTreeMap<Bytes, Bytes>;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn majority_examples() {
        assert_eq!(majority(3), 2);
        assert_eq!(majority(1), 1);
        assert_eq!(majority(4), 3);
    }

    #[test]
    fn up_to_date_examples() {
        assert_eq!(log_up_to_date((2, 5), (1, 9)), Freshness::ANewer);
        assert_eq!(log_up_to_date((2, 5), (2, 7)), Freshness::BNewer);
        assert_eq!(log_up_to_date((3, 4), (3, 4)), Freshness::Equal);
    }

    proptest! {
        #[test]
        fn majority_is_strict(n in 1usize..10_000) {
            prop_assert!(2 * majority(n) > n);
            prop_assert!(majority(n) <= n);
        }

        #[test]
        fn up_to_date_antisymmetric(a in (0u64..5, 0u64..20), b in (0u64..5, 0u64..20)) {
            let ab = log_up_to_date(a, b);
            let ba = log_up_to_date(b, a);
            match ab {
                Freshness::ANewer => prop_assert_eq!(ba, Freshness::BNewer),
                Freshness::BNewer => prop_assert_eq!(ba, Freshness::ANewer),
                Freshness::Equal => { prop_assert_eq!(ba, Freshness::Equal); prop_assert_eq!(a, b); }
            }
        }
    }

    fn put(k: &str) -> Command {
        Command::Put { key: Bytes::copy_from_slice(k.as_bytes()), value: Bytes::from_static(b"v") }
    }

    #[test]
    fn merge_overwrites_conflicting_suffix() {
        let d = DomainId(1);
        let mut log = ReplicatedLog::new();
        log.push(1, put("a"), d, None);
        log.push(1, put("b"), d, None);
        log.push(1, put("c"), d, None);

        let mut leader = ReplicatedLog::new();
        leader.push(1, put("a"), d, None);
        leader.push(2, put("x"), d, None);

        let truncated = log.merge(&leader.slice_from(2));
        assert_eq!(truncated, Some(2));
        assert_eq!(log.last_index(), 2);
        assert_eq!(log.get(2), leader.get(2));
    }

    #[test]
    fn merge_keeps_matching_suffix() {
        let d = DomainId(1);
        let mut log = ReplicatedLog::new();
        for k in ["a", "b", "c"] {
            log.push(1, put(k), d, None);
        }
        let copy = log.clone();
        assert_eq!(log.merge(&copy.slice_from(1)[..1]), None);
        assert_eq!(log.last_index(), 3);
    }

    #[test]
    fn latency_matrix_rejects_asymmetry() {
        let m = vec![vec![0.0, 10.0], vec![11.0, 0.0]];
        assert!(LatencyMatrix::new(m, 0.25).is_err());
        let ok = LatencyMatrix::new(vec![vec![0.0, 10.0], vec![10.0, 0.0]], 0.25).unwrap();
        assert_eq!(ok.one_way(DomainId(1), DomainId(1)), 0.25);
        assert_eq!(ok.rtt(DomainId(1), DomainId(2)), 20.0);
    }

    #[test]
    fn topology_requires_two_domains() {
        assert!(ClusterTopology::uniform(1, 3).is_err());
        assert!(ClusterTopology::new(vec![3, 0]).is_err());
        let t = ClusterTopology::uniform(3, 3).unwrap();
        assert_eq!(t.all_nodes().len(), 9);
        assert!(t.contains_node(NodeId::new(3, 2)));
        assert!(!t.contains_node(NodeId::new(3, 3)));
    }
}
