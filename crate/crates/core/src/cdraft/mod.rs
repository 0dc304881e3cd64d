//! The cross-domain Raft state machine.
//!
//! Every domain elects a domain leader with ordinary majority voting; the
//! domain leaders elect one of themselves as global leader. All client
//! requests go to the global leader, which fans each write out to every
//! domain leader and to its own domain's followers in the same step. An entry
//! is durable (committed) once a majority of the global leader's domain and a
//! majority of at least one other domain hold it. The domain leader of a
//! remote client answers that client directly ("fast return") as soon as its
//! own domain holds the entry on a majority and the global leader has
//! confirmed the same for its domain, which costs the client a single
//! cross-domain round trip.
//!
//! A node is a plain value: events go in through [`ProtocolNode`] (or the
//! individual `handle_*` methods) and outgoing messages are pushed into an
//! [`Outbox`].

mod election;
mod message;
mod replication;
mod timers;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use message::CdMessage;

use crate::placement::{DomainLoadProfile, PlacementPolicy};
use crate::protocol::{LeaderClaim, NodeView, Outbox, Payload, ProtocolNode, TimeoutKind};
use crate::types::{
    majority, Addr, ClientId, ClusterTopology, DomainId, KvStore, LatencyMatrix, LogIndex, NodeId, ReplicatedLog,
    RequestTag, SimTime, Term,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Follower,
    DomainCandidate,
    DomainLeader,
    /// A domain leader campaigning for global leadership; it keeps leading
    /// its domain meanwhile.
    GlobalCandidate,
    /// The global leader, always also the leader of its own domain.
    GlobalLeader,
}

impl Role {
    pub fn leads_domain(self) -> bool {
        matches!(self, Role::DomainLeader | Role::GlobalCandidate | Role::GlobalLeader)
    }
}

/// How the global leader decides that an entry is committed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CommitRule {
    /// Majority of the leader's domain plus a majority of one other domain.
    TwoDomain,
    /// Majority of the leader's domain only. Unsafe; exists so the model
    /// checker can demonstrate that it detects a broken commit rule.
    LeaderDomainOnly,
}

/// Leader placement inputs the global leader needs to re-evaluate its
/// position.
#[derive(Clone, Debug)]
pub struct PlacementSetup {
    pub latency: LatencyMatrix,
    pub policy: PlacementPolicy,
}

/// Static, shared configuration of a CD-Raft cluster.
#[derive(Clone, Debug)]
pub struct CdConfig {
    pub topology: ClusterTopology,
    pub domain_heartbeat: SimTime,
    pub global_heartbeat: SimTime,
    /// Election timeouts are drawn uniformly from this range of heartbeat
    /// intervals, per tier.
    pub election_ticks: (u64, u64),
    /// A domain is suspected unavailable after this many global heartbeat
    /// intervals without an acknowledgment.
    pub suspect_after_ticks: u64,
    pub commit_rule: CommitRule,
    pub placement: Option<PlacementSetup>,
    pub seed: u64,
}

impl CdConfig {
    pub fn new(topology: ClusterTopology) -> Self {
        Self {
            topology,
            domain_heartbeat: SimTime::from_millis(5),
            global_heartbeat: SimTime::from_millis(50),
            election_ticks: (10, 20),
            suspect_after_ticks: 10,
            commit_rule: CommitRule::TwoDomain,
            placement: None,
            seed: 0,
        }
    }

    /// Votes a global candidate needs, counting its own: `N - 1` domain
    /// leaders, but never fewer than a majority of domains.
    pub fn global_quorum(&self) -> usize {
        let n = self.topology.domain_count();
        (n - 1).max(majority(n))
    }

    fn max_global_election_timeout(&self) -> SimTime {
        self.global_heartbeat.mul(self.election_ticks.1)
    }
}

/// A domain leader's view of one follower.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub(crate) struct FollowerProgress {
    pub next: LogIndex,
    pub matched: LogIndex,
}

/// The global leader's view of one remote domain.
#[derive(Clone, Debug)]
pub(crate) struct DomainProgress {
    pub leader: Option<NodeId>,
    pub next: LogIndex,
    /// Prefix of the domain leader's log known to equal ours.
    pub dl_match: LogIndex,
    /// Prefix held by a majority of that domain.
    pub majority_ack: LogIndex,
    pub last_heard: SimTime,
    pub suspected: bool,
}

impl Hash for DomainProgress {
    fn hash<H: Hasher>(&self, state: &mut H) {
        (self.leader, self.next, self.dl_match, self.majority_ack, self.suspected).hash(state);
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub(crate) struct PendingRead {
    pub read_index: LogIndex,
    pub tag: RequestTag,
    pub key: Bytes,
}

#[derive(Clone, Debug)]
pub(crate) struct Transfer {
    pub target: DomainId,
    pub started: SimTime,
    pub sent: bool,
}

/// One CD-Raft server.
#[derive(Clone, Debug)]
pub struct CdNode {
    cfg: Arc<CdConfig>,
    id: NodeId,
    role: Role,

    // Survives restarts.
    domain_term: Term,
    global_term: Term,
    voted_domain: Option<NodeId>,
    voted_global: Option<NodeId>,
    log: ReplicatedLog,
    commit_index: LogIndex,

    in_domain_commit: LogIndex,
    apply_index: LogIndex,
    kv: KvStore,
    domain_leader: Option<NodeId>,
    global_leader: Option<NodeId>,

    // Domain leader state.
    followers: BTreeMap<NodeId, FollowerProgress>,
    /// Prefix of our log verified equal to the global leader's in the
    /// current global term.
    global_match: LogIndex,
    /// Highest in-domain commit index the global leader has announced.
    commit_hint: LogIndex,
    fast_returns: BTreeMap<LogIndex, RequestTag>,

    // Global leader state.
    domains: BTreeMap<DomainId, DomainProgress>,
    replies: BTreeMap<LogIndex, RequestTag>,
    reads: VecDeque<PendingRead>,
    term_start: LogIndex,
    transfer: Option<Transfer>,
    sessions: BTreeMap<ClientId, (u64, LogIndex)>,
    load: DomainLoadProfile,
    next_placement: SimTime,
    migrations: u64,

    domain_votes: BTreeSet<NodeId>,
    global_votes: BTreeMap<DomainId, NodeId>,

    domain_deadline: SimTime,
    global_deadline: SimTime,
    heartbeat_due: SimTime,
    global_heartbeat_due: SimTime,
    rng: ChaCha8Rng,
}

impl CdNode {
    /// A fresh follower with an empty log.
    pub fn new(cfg: Arc<CdConfig>, id: NodeId, now: SimTime) -> Self {
        assert!(cfg.topology.contains_node(id), "{id} is not part of the topology");
        let seed = cfg.seed ^ ((id.domain.0 as u64) << 32 | id.ordinal as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let domains = cfg.topology.domain_count();
        let mut node = Self {
            cfg,
            id,
            role: Role::Follower,
            domain_term: 0,
            global_term: 0,
            voted_domain: None,
            voted_global: None,
            log: ReplicatedLog::new(),
            commit_index: 0,
            in_domain_commit: 0,
            apply_index: 0,
            kv: KvStore::new(),
            domain_leader: None,
            global_leader: None,
            followers: BTreeMap::new(),
            global_match: 0,
            commit_hint: 0,
            fast_returns: BTreeMap::new(),
            domains: BTreeMap::new(),
            replies: BTreeMap::new(),
            reads: VecDeque::new(),
            term_start: 0,
            transfer: None,
            sessions: BTreeMap::new(),
            load: DomainLoadProfile::new(domains),
            next_placement: SimTime::MAX,
            migrations: 0,
            domain_votes: BTreeSet::new(),
            global_votes: BTreeMap::new(),
            domain_deadline: SimTime::MAX,
            global_deadline: SimTime::MAX,
            heartbeat_due: SimTime::MAX,
            global_heartbeat_due: SimTime::MAX,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        node.reset_domain_deadline(now);
        node
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn domain(&self) -> DomainId {
        self.id.domain
    }

    pub fn config(&self) -> &CdConfig {
        &self.cfg
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn domain_term(&self) -> Term {
        self.domain_term
    }

    pub fn global_term(&self) -> Term {
        self.global_term
    }

    pub fn log(&self) -> &ReplicatedLog {
        &self.log
    }

    pub fn commit_index(&self) -> LogIndex {
        self.commit_index
    }

    pub fn in_domain_commit(&self) -> LogIndex {
        self.in_domain_commit
    }

    pub fn apply_index(&self) -> LogIndex {
        self.apply_index
    }

    pub fn kv(&self) -> &KvStore {
        &self.kv
    }

    pub fn commit_hint(&self) -> LogIndex {
        self.commit_hint
    }

    pub fn global_leader(&self) -> Option<NodeId> {
        self.global_leader
    }

    pub fn domain_leader(&self) -> Option<NodeId> {
        self.domain_leader
    }

    pub fn is_global_leader(&self) -> bool {
        self.role == Role::GlobalLeader
    }

    pub fn pending_fast_returns(&self) -> usize {
        self.fast_returns.len()
    }

    pub fn pending_reads(&self) -> usize {
        self.reads.len()
    }

    pub fn is_suspected(&self, d: DomainId) -> bool {
        self.domains.get(&d).is_some_and(|p| p.suspected)
    }

    pub fn transfer_target(&self) -> Option<DomainId> {
        self.transfer.as_ref().map(|t| t.target)
    }

    /// Request counts observed in the current placement window.
    pub fn load(&self) -> &DomainLoadProfile {
        &self.load
    }

    fn domain_size(&self) -> usize {
        self.cfg.topology.nodes_in(self.domain()) as usize
    }

    fn domain_peers(&self) -> Vec<NodeId> {
        self.cfg.topology.domain_members(self.domain()).filter(|&n| n != self.id).collect()
    }

    fn other_domains(&self) -> Vec<DomainId> {
        self.cfg.topology.domains().filter(|&d| d != self.domain()).collect()
    }

    fn random_timeout(&mut self, interval: SimTime) -> SimTime {
        let (lo, hi) = self.cfg.election_ticks;
        let ticks = self.rng.random_range(lo..=hi);
        interval.mul(ticks)
    }

    fn reset_domain_deadline(&mut self, now: SimTime) {
        let t = self.random_timeout(self.cfg.domain_heartbeat);
        self.domain_deadline = now + t;
    }

    fn reset_global_deadline(&mut self, now: SimTime) {
        let t = self.random_timeout(self.cfg.global_heartbeat);
        self.global_deadline = now + t;
    }

    /// Where to send a client that contacted the wrong node.
    fn redirect_hint(&self) -> Option<NodeId> {
        match (&self.transfer, self.role) {
            (Some(t), Role::GlobalLeader) => self.domains.get(&t.target).and_then(|p| p.leader),
            _ => self.global_leader.filter(|&g| g != self.id),
        }
    }

    /// Steps down to follower of `domain_term` (adopting it if higher),
    /// dropping every leadership role.
    fn become_follower(&mut self, now: SimTime, domain_term: Term) {
        if domain_term > self.domain_term {
            self.domain_term = domain_term;
            self.voted_domain = None;
        }
        if self.role != Role::Follower {
            self.clear_global_leadership();
            self.followers.clear();
            self.fast_returns.clear();
            self.global_match = 0;
            self.commit_hint = 0;
            self.domain_votes.clear();
            self.global_votes.clear();
            self.role = Role::Follower;
            self.global_deadline = SimTime::MAX;
            self.heartbeat_due = SimTime::MAX;
        }
        self.domain_leader = None;
        self.reset_domain_deadline(now);
    }

    fn clear_global_leadership(&mut self) {
        self.domains.clear();
        self.replies.clear();
        self.reads.clear();
        self.transfer = None;
        self.term_start = 0;
        self.next_placement = SimTime::MAX;
        self.global_heartbeat_due = SimTime::MAX;
    }

    /// Adopts a higher global term. A global leader or candidate falls back
    /// to plain domain leader.
    fn observe_global_term(&mut self, now: SimTime, term: Term) {
        if term <= self.global_term {
            return;
        }
        self.global_term = term;
        self.voted_global = None;
        self.global_leader = None;
        self.global_match = 0;
        self.commit_hint = 0;
        self.global_votes.clear();
        if matches!(self.role, Role::GlobalLeader | Role::GlobalCandidate) {
            self.clear_global_leadership();
            self.role = Role::DomainLeader;
        }
        if self.role.leads_domain() {
            self.reset_global_deadline(now);
        }
    }

    fn rebuild_sessions(&mut self) {
        self.sessions.clear();
        for e in self.log.entries() {
            if let Some(tag) = e.request {
                let slot = self.sessions.entry(tag.client).or_insert((tag.req_id, e.index));
                if tag.req_id >= slot.0 {
                    *slot = (tag.req_id, e.index);
                }
            }
        }
    }

    fn handle_peer(&mut self, now: SimTime, from: NodeId, msg: CdMessage, out: &mut Outbox<CdMessage>) {
        match msg {
            CdMessage::GlobalAppend { .. } => self.handle_global_append(now, from, msg, out),
            CdMessage::GlobalAck { global_term, domain, success, match_index, majority_index } => {
                self.handle_global_ack(now, from, global_term, domain, success, match_index, majority_index, out)
            }
            CdMessage::GlobalCommitHint { global_term, index } => {
                self.handle_commit_hint(now, from, global_term, index, out)
            }
            CdMessage::DomainAppend { .. } => self.handle_domain_append(now, from, msg, out),
            CdMessage::DomainAck { domain_term, success, match_index, match_term } => {
                self.handle_domain_ack(now, from, domain_term, success, match_index, match_term, out)
            }
            CdMessage::DomainVoteRequest { domain_term, last_term, last_index } => {
                self.handle_domain_vote_request(now, from, domain_term, (last_term, last_index), out)
            }
            CdMessage::DomainVoteResponse { domain_term, granted } => {
                self.handle_domain_vote_response(now, from, domain_term, granted, out)
            }
            CdMessage::GlobalVoteRequest { global_term, last_term, last_index } => {
                self.handle_global_vote_request(now, from, global_term, (last_term, last_index), out)
            }
            CdMessage::GlobalVoteResponse { global_term, granted } => {
                self.handle_global_vote_response(now, from, global_term, granted, out)
            }
            CdMessage::GlobalTransfer { global_term, target_domain } => {
                self.handle_transfer_request(now, from, global_term, target_domain, out)
            }
        }
    }
}

/// Builds a cluster in a settled state: ordinal 0 of every domain leads its
/// domain in domain term 1, and the leader of `global_domain` is global
/// leader in global term 1.
pub fn bootstrap(cfg: Arc<CdConfig>, global_domain: DomainId, now: SimTime) -> Vec<CdNode> {
    let topo = cfg.topology.clone();
    assert!(topo.contains_domain(global_domain));
    let gl = NodeId { domain: global_domain, ordinal: 0 };
    let mut nodes = Vec::new();
    for id in topo.all_nodes() {
        let mut n = CdNode::new(cfg.clone(), id, now);
        let dl = NodeId { domain: id.domain, ordinal: 0 };
        n.domain_term = 1;
        n.global_term = 1;
        n.voted_domain = Some(dl);
        n.domain_leader = Some(dl);
        n.global_leader = Some(gl);
        if id == dl {
            n.voted_global = Some(gl);
            n.role = Role::DomainLeader;
            n.followers = n
                .domain_peers()
                .into_iter()
                .map(|p| (p, FollowerProgress { next: 1, matched: 0 }))
                .collect();
            n.heartbeat_due = now + cfg.domain_heartbeat;
            n.reset_global_deadline(now);
            n.domain_deadline = SimTime::MAX;
            if id == gl {
                n.role = Role::GlobalLeader;
                n.global_deadline = SimTime::MAX;
                n.global_heartbeat_due = now + cfg.global_heartbeat;
                n.domains = n
                    .other_domains()
                    .into_iter()
                    .map(|d| {
                        let progress = DomainProgress {
                            leader: Some(NodeId { domain: d, ordinal: 0 }),
                            next: 1,
                            dl_match: 0,
                            majority_ack: 0,
                            last_heard: now,
                            suspected: false,
                        };
                        (d, progress)
                    })
                    .collect();
                n.arm_placement(now);
            }
            if n.domain_size() == 1 {
                n.in_domain_commit = n.log.last_index();
            }
        }
        nodes.push(n);
    }
    nodes
}

impl ProtocolNode for CdNode {
    type Msg = CdMessage;
    const NAME: &'static str = "cdraft";

    fn id(&self) -> NodeId {
        self.id
    }

    fn on_message(&mut self, now: SimTime, from: Addr, payload: Payload<CdMessage>, out: &mut Outbox<CdMessage>) {
        match (payload, from) {
            (Payload::Request(req), _) => {
                if req.op.is_write() {
                    self.handle_client_write(now, req, out);
                } else {
                    self.handle_client_read(now, req, out);
                }
            }
            (Payload::Peer(msg), Addr::Node(src)) => self.handle_peer(now, src, msg, out),
            // Servers never receive responses; peers never speak as clients.
            (Payload::Response(_), _) | (Payload::Peer(_), Addr::Client(_)) => {}
        }
    }

    fn on_tick(&mut self, now: SimTime, out: &mut Outbox<CdMessage>) {
        self.tick(now, out);
    }

    fn next_deadline(&self) -> SimTime {
        self.next_timer()
    }

    fn enabled_timeouts(&self) -> Vec<TimeoutKind> {
        match self.role {
            Role::Follower | Role::DomainCandidate => vec![TimeoutKind::Election],
            Role::DomainLeader | Role::GlobalCandidate => vec![TimeoutKind::GlobalElection, TimeoutKind::Heartbeat],
            Role::GlobalLeader => vec![TimeoutKind::Heartbeat],
        }
    }

    fn fire_timeout(&mut self, now: SimTime, kind: TimeoutKind, out: &mut Outbox<CdMessage>) {
        match kind {
            TimeoutKind::Election => {
                if !self.role.leads_domain() {
                    self.start_domain_election(now, out);
                }
            }
            TimeoutKind::GlobalElection => {
                let _ = self.start_global_election(now, out);
            }
            TimeoutKind::Heartbeat => {
                if self.role.leads_domain() {
                    self.domain_heartbeat(now, out);
                }
                if self.role == Role::GlobalLeader {
                    self.global_heartbeat(now, out);
                }
            }
        }
    }

    fn restart(&mut self, now: SimTime) {
        let mut fresh = CdNode::new(self.cfg.clone(), self.id, now);
        fresh.domain_term = self.domain_term;
        fresh.global_term = self.global_term;
        fresh.voted_domain = self.voted_domain;
        fresh.voted_global = self.voted_global;
        fresh.log = std::mem::take(&mut self.log);
        fresh.commit_index = self.commit_index;
        fresh.rng = self.rng.clone();
        fresh.migrations = self.migrations;
        fresh.reset_domain_deadline(now);
        fresh.apply_committed(&mut Outbox::new());
        *self = fresh;
    }

    fn view(&self) -> NodeView<'_> {
        let mut claims = Vec::new();
        if self.role.leads_domain() {
            claims.push(LeaderClaim::Domain { domain: self.domain(), term: self.domain_term });
        }
        if self.role == Role::GlobalLeader {
            claims.push(LeaderClaim::Global { term: self.global_term });
        }
        NodeView {
            id: self.id,
            log: &self.log,
            commit_index: self.commit_index,
            apply_index: self.apply_index,
            in_domain_commit: (self.role == Role::GlobalLeader).then_some(self.in_domain_commit),
            kv: &self.kv,
            claims,
            serving: self.role == Role::GlobalLeader && self.transfer.is_none(),
        }
    }

    fn fingerprint<H: Hasher>(&self, h: &mut H) {
        self.id.hash(h);
        self.role.hash(h);
        (self.domain_term, self.global_term, self.voted_domain, self.voted_global).hash(h);
        self.log.hash(h);
        (self.commit_index, self.in_domain_commit, self.apply_index).hash(h);
        (self.domain_leader, self.global_leader).hash(h);
        self.followers.hash(h);
        (self.global_match, self.commit_hint).hash(h);
        self.fast_returns.hash(h);
        self.domains.hash(h);
        self.replies.hash(h);
        self.reads.hash(h);
        self.term_start.hash(h);
        self.transfer.as_ref().map(|t| (t.target, t.sent)).hash(h);
        self.domain_votes.hash(h);
        self.global_votes.hash(h);
    }

    fn migrations(&self) -> u64 {
        self.migrations
    }
}

#[cfg(test)]
mod tests;
