//! Plain single-leader Raft over every node of every domain, the baseline
//! CD-Raft is measured against.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::protocol::{
    ClientOp, ClientRequest, ClientResult, LeaderClaim, MessageInfo, NodeView, Outbox, Payload, ProtocolNode,
    SizeClass, TimeoutKind,
};
use crate::types::{
    candidate_is_current, majority, Addr, ClientId, ClusterTopology, Command, DomainId, KvStore, LogEntry, LogIndex,
    NodeId, ReplicatedLog, RequestTag, SimTime, Term,
};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RaftMessage {
    AppendEntries { term: Term, prev_index: LogIndex, prev_term: Term, entries: Vec<LogEntry>, commit: LogIndex },
    AppendResponse { term: Term, success: bool, match_index: LogIndex, match_term: Term },
    RequestVote { term: Term, last_term: Term, last_index: LogIndex },
    VoteResponse { term: Term, granted: bool },
}

impl MessageInfo for RaftMessage {
    fn variant(&self) -> &'static str {
        match self {
            RaftMessage::AppendEntries { .. } => "AppendEntries",
            RaftMessage::AppendResponse { .. } => "AppendResponse",
            RaftMessage::RequestVote { .. } => "RequestVote",
            RaftMessage::VoteResponse { .. } => "VoteResponse",
        }
    }

    fn size_class(&self) -> SizeClass {
        match self {
            RaftMessage::AppendEntries { entries, .. } if !entries.is_empty() => SizeClass::Data,
            _ => SizeClass::Control,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RaftRole {
    Follower,
    Candidate,
    Leader,
}

#[derive(Clone, Debug)]
pub struct RaftConfig {
    pub topology: ClusterTopology,
    pub heartbeat: SimTime,
    pub election_ticks: (u64, u64),
    pub seed: u64,
}

impl RaftConfig {
    pub fn new(topology: ClusterTopology) -> Self {
        Self { topology, heartbeat: SimTime::from_millis(50), election_ticks: (10, 20), seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct Progress {
    next: LogIndex,
    matched: LogIndex,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct PendingRead {
    read_index: LogIndex,
    tag: RequestTag,
    key: Bytes,
}

#[derive(Clone, Debug)]
pub struct RaftNode {
    cfg: Arc<RaftConfig>,
    id: NodeId,
    role: RaftRole,
    term: Term,
    voted_for: Option<NodeId>,
    log: ReplicatedLog,
    commit_index: LogIndex,
    apply_index: LogIndex,
    kv: KvStore,
    leader: Option<NodeId>,
    progress: BTreeMap<NodeId, Progress>,
    replies: BTreeMap<LogIndex, RequestTag>,
    reads: VecDeque<PendingRead>,
    sessions: BTreeMap<ClientId, (u64, LogIndex)>,
    term_start: LogIndex,
    votes: BTreeSet<NodeId>,
    election_deadline: SimTime,
    heartbeat_due: SimTime,
    rng: ChaCha8Rng,
}

impl RaftNode {
    pub fn new(cfg: Arc<RaftConfig>, id: NodeId, now: SimTime) -> Self {
        assert!(cfg.topology.contains_node(id), "{id} is not part of the topology");
        let seed = cfg.seed ^ ((id.domain.0 as u64) << 32 | id.ordinal as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut node = Self {
            cfg,
            id,
            role: RaftRole::Follower,
            term: 0,
            voted_for: None,
            log: ReplicatedLog::new(),
            commit_index: 0,
            apply_index: 0,
            kv: KvStore::new(),
            leader: None,
            progress: BTreeMap::new(),
            replies: BTreeMap::new(),
            reads: VecDeque::new(),
            sessions: BTreeMap::new(),
            term_start: 0,
            votes: BTreeSet::new(),
            election_deadline: SimTime::MAX,
            heartbeat_due: SimTime::MAX,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        node.reset_election_deadline(now);
        node
    }

    pub fn role(&self) -> RaftRole {
        self.role
    }

    pub fn term(&self) -> Term {
        self.term
    }

    pub fn log(&self) -> &ReplicatedLog {
        &self.log
    }

    pub fn commit_index(&self) -> LogIndex {
        self.commit_index
    }

    pub fn apply_index(&self) -> LogIndex {
        self.apply_index
    }

    pub fn kv(&self) -> &KvStore {
        &self.kv
    }

    pub fn leader(&self) -> Option<NodeId> {
        self.leader
    }

    fn peers(&self) -> Vec<NodeId> {
        self.cfg.topology.all_nodes().into_iter().filter(|&n| n != self.id).collect()
    }

    fn quorum(&self) -> usize {
        majority(self.cfg.topology.total_nodes())
    }

    fn reset_election_deadline(&mut self, now: SimTime) {
        let (lo, hi) = self.cfg.election_ticks;
        let ticks = self.rng.random_range(lo..=hi);
        self.election_deadline = now + self.cfg.heartbeat.mul(ticks);
    }

    fn step_down(&mut self, now: SimTime, term: Term) {
        if term > self.term {
            self.term = term;
            self.voted_for = None;
            self.leader = None;
        }
        if self.role != RaftRole::Follower {
            self.role = RaftRole::Follower;
            self.progress.clear();
            self.replies.clear();
            self.reads.clear();
            self.votes.clear();
            self.heartbeat_due = SimTime::MAX;
        }
        self.reset_election_deadline(now);
    }

    fn start_election(&mut self, now: SimTime, out: &mut Outbox<RaftMessage>) {
        if self.role == RaftRole::Leader {
            return;
        }
        self.term += 1;
        self.role = RaftRole::Candidate;
        self.voted_for = Some(self.id);
        self.leader = None;
        self.votes = BTreeSet::from([self.id]);
        self.reset_election_deadline(now);
        if self.votes.len() >= self.quorum() {
            self.become_leader(now, out);
            return;
        }
        let (last_term, last_index) = self.log.last_position();
        for p in self.peers() {
            out.send(p, RaftMessage::RequestVote { term: self.term, last_term, last_index });
        }
    }

    fn become_leader(&mut self, now: SimTime, out: &mut Outbox<RaftMessage>) {
        self.role = RaftRole::Leader;
        self.leader = Some(self.id);
        self.votes.clear();
        self.election_deadline = SimTime::MAX;
        self.term_start = self.log.push(self.term, Command::NoOp, self.id.domain, None);
        let next = self.term_start;
        self.progress = self.peers().into_iter().map(|p| (p, Progress { next, matched: 0 })).collect();
        self.sessions.clear();
        for e in self.log.entries() {
            if let Some(tag) = e.request {
                self.sessions.insert(tag.client, (tag.req_id, e.index));
            }
        }
        self.heartbeat_due = now + self.cfg.heartbeat;
        self.broadcast_append(out);
        self.advance_commit(out);
    }

    fn send_append(&mut self, peer: NodeId, out: &mut Outbox<RaftMessage>) {
        let last = self.log.last_index();
        let Some(p) = self.progress.get_mut(&peer) else { return };
        let prev_index = p.next - 1;
        let msg = RaftMessage::AppendEntries {
            term: self.term,
            prev_index,
            prev_term: self.log.term_at(prev_index).expect("next index within log"),
            entries: self.log.slice_from(p.next),
            commit: self.commit_index,
        };
        p.next = last + 1;
        out.send(peer, msg);
    }

    fn broadcast_append(&mut self, out: &mut Outbox<RaftMessage>) {
        for p in self.peers() {
            self.send_append(p, out);
        }
    }

    fn handle_client(&mut self, req: ClientRequest, out: &mut Outbox<RaftMessage>) {
        let tag = req.tag;
        if self.role != RaftRole::Leader {
            out.respond(tag, ClientResult::Redirect(self.leader.filter(|&l| l != self.id)));
            return;
        }
        match req.op {
            ClientOp::Get { key } => {
                let read_index = self.commit_index.max(self.term_start);
                if self.apply_index >= read_index {
                    out.respond(tag, ClientResult::Value(self.kv.get(&key).cloned()));
                } else {
                    self.reads.push_back(PendingRead { read_index, tag, key });
                }
            }
            ClientOp::Put { key, value } => {
                if let Some(&(req_id, index)) = self.sessions.get(&tag.client) {
                    if req_id == tag.req_id {
                        if index <= self.commit_index {
                            out.respond(tag, ClientResult::WriteOk);
                        } else {
                            self.replies.insert(index, tag);
                        }
                        return;
                    }
                    if req_id > tag.req_id {
                        return;
                    }
                }
                let index = self.log.push(self.term, Command::Put { key, value }, tag.client.domain, Some(tag));
                self.sessions.insert(tag.client, (tag.req_id, index));
                self.replies.insert(index, tag);
                self.broadcast_append(out);
                self.advance_commit(out);
            }
        }
    }

    fn handle_peer(&mut self, now: SimTime, from: NodeId, msg: RaftMessage, out: &mut Outbox<RaftMessage>) {
        match msg {
            RaftMessage::AppendEntries { term, prev_index, prev_term, entries, commit } => {
                if term < self.term {
                    out.send(from, RaftMessage::AppendResponse { term: self.term, success: false, match_index: 0, match_term: 0 });
                    return;
                }
                if term > self.term || self.role != RaftRole::Follower {
                    self.step_down(now, term);
                }
                self.leader = Some(from);
                self.reset_election_deadline(now);
                if !self.log.matches(prev_index, prev_term) {
                    let hint = if prev_index > self.log.last_index() { self.log.last_index() } else { prev_index - 1 };
                    out.send(from, RaftMessage::AppendResponse { term, success: false, match_index: hint, match_term: 0 });
                    return;
                }
                if let Some(t) = self.log.merge(&entries) {
                    debug_assert!(t > self.commit_index, "committed entry truncated");
                }
                let last_new = prev_index + entries.len() as LogIndex;
                if commit > self.commit_index {
                    self.commit_index = self.commit_index.max(commit.min(last_new));
                    self.apply(out);
                }
                let match_term = self.log.term_at(last_new).expect("merged prefix present");
                out.send(from, RaftMessage::AppendResponse { term, success: true, match_index: last_new, match_term });
            }
            RaftMessage::AppendResponse { term, success, match_index, match_term } => {
                if term > self.term {
                    self.step_down(now, term);
                    return;
                }
                if self.role != RaftRole::Leader || term != self.term {
                    return;
                }
                let term_ok = self.log.term_at(match_index) == Some(match_term);
                let Some(p) = self.progress.get_mut(&from) else { return };
                if success {
                    if term_ok && match_index > p.matched {
                        p.matched = match_index;
                        p.next = p.next.max(match_index + 1);
                    }
                    self.advance_commit(out);
                } else {
                    p.next = (match_index + 1).min(p.next).max(p.matched + 1);
                    self.send_append(from, out);
                }
            }
            RaftMessage::RequestVote { term, last_term, last_index } => {
                if term > self.term {
                    self.step_down(now, term);
                }
                let granted = term == self.term
                    && self.role == RaftRole::Follower
                    && self.voted_for.is_none_or(|v| v == from)
                    && candidate_is_current((last_term, last_index), self.log.last_position());
                if granted {
                    self.voted_for = Some(from);
                    self.reset_election_deadline(now);
                }
                out.send(from, RaftMessage::VoteResponse { term: self.term, granted });
            }
            RaftMessage::VoteResponse { term, granted } => {
                if term > self.term {
                    self.step_down(now, term);
                    return;
                }
                if self.role == RaftRole::Candidate && term == self.term && granted {
                    self.votes.insert(from);
                    if self.votes.len() >= self.quorum() {
                        self.become_leader(now, out);
                    }
                }
            }
        }
    }

    fn advance_commit(&mut self, out: &mut Outbox<RaftMessage>) {
        let mut matched: Vec<LogIndex> = self.progress.values().map(|p| p.matched).collect();
        matched.push(self.log.last_index());
        matched.sort_unstable_by(|a, b| b.cmp(a));
        let candidate = matched[self.quorum() - 1];
        if candidate > self.commit_index && self.log.term_at(candidate) == Some(self.term) {
            self.commit_index = candidate;
            self.apply(out);
        }
    }

    fn apply(&mut self, out: &mut Outbox<RaftMessage>) {
        while self.apply_index < self.commit_index {
            self.apply_index += 1;
            let e = self.log.get(self.apply_index).expect("committed entry present");
            if let Command::Put { key, value } = &e.command {
                self.kv.insert(key.clone(), value.clone());
            }
        }
        if self.role != RaftRole::Leader {
            return;
        }
        while let Some(entry) = self.replies.first_entry() {
            if *entry.key() > self.apply_index {
                break;
            }
            out.respond(entry.remove(), ClientResult::WriteOk);
        }
        while self.reads.front().is_some_and(|r| r.read_index <= self.apply_index) {
            let r = self.reads.pop_front().expect("front checked");
            out.respond(r.tag, ClientResult::Value(self.kv.get(&r.key).cloned()));
        }
    }
}

/// A settled cluster: the first node of `leader_domain` leads term 1.
pub fn bootstrap(cfg: Arc<RaftConfig>, leader_domain: DomainId, now: SimTime) -> Vec<RaftNode> {
    let leader = NodeId { domain: leader_domain, ordinal: 0 };
    assert!(cfg.topology.contains_node(leader));
    cfg.topology
        .all_nodes()
        .into_iter()
        .map(|id| {
            let mut n = RaftNode::new(cfg.clone(), id, now);
            n.term = 1;
            n.voted_for = Some(leader);
            n.leader = Some(leader);
            if id == leader {
                n.role = RaftRole::Leader;
                n.election_deadline = SimTime::MAX;
                n.heartbeat_due = now + cfg.heartbeat;
                n.progress = n.peers().into_iter().map(|p| (p, Progress { next: 1, matched: 0 })).collect();
            }
            n
        })
        .collect()
}

impl ProtocolNode for RaftNode {
    type Msg = RaftMessage;
    const NAME: &'static str = "raft";

    fn id(&self) -> NodeId {
        self.id
    }

    fn on_message(&mut self, now: SimTime, from: Addr, payload: Payload<RaftMessage>, out: &mut Outbox<RaftMessage>) {
        match (payload, from) {
            (Payload::Request(req), _) => self.handle_client(req, out),
            (Payload::Peer(msg), Addr::Node(src)) => self.handle_peer(now, src, msg, out),
            (Payload::Response(_), _) | (Payload::Peer(_), Addr::Client(_)) => {}
        }
    }

    fn on_tick(&mut self, now: SimTime, out: &mut Outbox<RaftMessage>) {
        if self.role == RaftRole::Leader {
            if now >= self.heartbeat_due {
                self.broadcast_append(out);
                self.heartbeat_due = now + self.cfg.heartbeat;
            }
        } else if now >= self.election_deadline {
            self.start_election(now, out);
        }
    }

    fn next_deadline(&self) -> SimTime {
        match self.role {
            RaftRole::Leader => self.heartbeat_due,
            _ => self.election_deadline,
        }
    }

    fn enabled_timeouts(&self) -> Vec<TimeoutKind> {
        match self.role {
            RaftRole::Leader => vec![TimeoutKind::Heartbeat],
            _ => vec![TimeoutKind::Election],
        }
    }

    fn fire_timeout(&mut self, now: SimTime, kind: TimeoutKind, out: &mut Outbox<RaftMessage>) {
        match (kind, self.role) {
            (TimeoutKind::Heartbeat, RaftRole::Leader) => self.broadcast_append(out),
            (TimeoutKind::Election, RaftRole::Follower | RaftRole::Candidate) => self.start_election(now, out),
            _ => {}
        }
    }

    fn restart(&mut self, now: SimTime) {
        let mut fresh = RaftNode::new(self.cfg.clone(), self.id, now);
        fresh.term = self.term;
        fresh.voted_for = self.voted_for;
        fresh.log = std::mem::take(&mut self.log);
        fresh.commit_index = self.commit_index;
        fresh.rng = self.rng.clone();
        fresh.reset_election_deadline(now);
        fresh.apply(&mut Outbox::new());
        *self = fresh;
    }

    fn view(&self) -> NodeView<'_> {
        let leading = self.role == RaftRole::Leader;
        NodeView {
            id: self.id,
            log: &self.log,
            commit_index: self.commit_index,
            apply_index: self.apply_index,
            in_domain_commit: None,
            kv: &self.kv,
            claims: if leading { vec![LeaderClaim::Global { term: self.term }] } else { Vec::new() },
            serving: leading,
        }
    }

    fn fingerprint<H: Hasher>(&self, h: &mut H) {
        (self.id, self.role, self.term, self.voted_for).hash(h);
        self.log.hash(h);
        (self.commit_index, self.apply_index, self.leader).hash(h);
        self.progress.hash(h);
        self.replies.hash(h);
        self.reads.hash(h);
        self.votes.hash(h);
    }
}
