//! The event interface shared by the CD-Raft and baseline Raft node state
//! machines. A node consumes one event (message delivery, tick or abstract
//! timeout) at a time and pushes the messages it wants sent into an
//! [`Outbox`]; it never touches a clock or a socket.

use std::fmt::Debug;
use std::hash::{Hash, Hasher};

use bytes::Bytes;

use crate::types::{Addr, DomainId, KvStore, LogIndex, NodeId, ReplicatedLog, RequestTag, SimTime, Term};

/// A client operation.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ClientOp {
    Put { key: Bytes, value: Bytes },
    Get { key: Bytes },
}

impl ClientOp {
    pub fn is_write(&self) -> bool {
        matches!(self, ClientOp::Put { .. })
    }

    pub fn key(&self) -> &Bytes {
        match self {
            ClientOp::Put { key, .. } | ClientOp::Get { key } => key,
        }
    }
}

/// `ClientWrite` / `ClientRead`: the client's domain is carried in the tag.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClientRequest {
    pub tag: RequestTag,
    pub op: ClientOp,
}

impl ClientRequest {
    pub fn client_domain(&self) -> DomainId {
        self.tag.client.domain
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ClientResult {
    WriteOk,
    /// Read result; `None` is an explicit not-found.
    Value(Option<Bytes>),
    /// The contacted node cannot serve the request; the hint names the
    /// leader it believes in, if any.
    Redirect(Option<NodeId>),
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClientResponse {
    pub tag: RequestTag,
    pub result: ClientResult,
}

/// What travels inside an envelope.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Payload<M> {
    Request(ClientRequest),
    Response(ClientResponse),
    Peer(M),
}

/// Coarse message size used in traces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SizeClass {
    /// Control traffic: votes, acks, empty heartbeats.
    Control,
    /// Carries log entries or values.
    Data,
}

impl SizeClass {
    pub fn as_str(self) -> &'static str {
        match self {
            SizeClass::Control => "ctl",
            SizeClass::Data => "data",
        }
    }
}

/// Introspection needed by traces and fault rules.
pub trait MessageInfo {
    fn variant(&self) -> &'static str;
    fn size_class(&self) -> SizeClass;
}

impl<M: MessageInfo> MessageInfo for Payload<M> {
    fn variant(&self) -> &'static str {
        match self {
            Payload::Request(r) if r.op.is_write() => "ClientWrite",
            Payload::Request(_) => "ClientRead",
            Payload::Response(_) => "ClientResponse",
            Payload::Peer(m) => m.variant(),
        }
    }

    fn size_class(&self) -> SizeClass {
        match self {
            Payload::Request(r) if r.op.is_write() => SizeClass::Data,
            Payload::Request(_) => SizeClass::Control,
            Payload::Response(ClientResponse { result: ClientResult::Value(Some(_)), .. }) => SizeClass::Data,
            Payload::Response(_) => SizeClass::Control,
            Payload::Peer(m) => m.size_class(),
        }
    }
}

/// Messages emitted while handling one event, in emission order.
#[derive(Debug)]
pub struct Outbox<M> {
    items: Vec<(Addr, Payload<M>)>,
}

impl<M> Default for Outbox<M> {
    fn default() -> Self {
        Self { items: Vec::new() }
    }
}

impl<M> Outbox<M> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn send(&mut self, to: impl Into<Addr>, msg: M) {
        self.items.push((to.into(), Payload::Peer(msg)));
    }

    pub fn respond(&mut self, tag: RequestTag, result: ClientResult) {
        self.items.push((Addr::Client(tag.client), Payload::Response(ClientResponse { tag, result })));
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn drain(&mut self) -> std::vec::Drain<'_, (Addr, Payload<M>)> {
        self.items.drain(..)
    }

    pub fn items(&self) -> &[(Addr, Payload<M>)] {
        &self.items
    }
}

/// Abstract timer classes, fired explicitly by the model checker instead of
/// through real deadlines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TimeoutKind {
    /// Domain-tier (CD-Raft) or cluster-wide (Raft) leader election.
    Election,
    /// CD-Raft global leader election, started by a domain leader.
    GlobalElection,
    /// Leader heartbeat / retransmission round.
    Heartbeat,
}

/// A leadership claim, used to check election safety.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LeaderClaim {
    /// Leader of one domain for one domain term.
    Domain { domain: DomainId, term: Term },
    /// Cluster-wide leader for one term (CD-Raft global leader or Raft
    /// leader).
    Global { term: Term },
}

/// Read-only projection of a node used by invariant monitors.
pub struct NodeView<'a> {
    pub id: NodeId,
    pub log: &'a ReplicatedLog,
    pub commit_index: LogIndex,
    pub apply_index: LogIndex,
    /// In-domain commit index on CD-Raft leaders; `None` elsewhere.
    pub in_domain_commit: Option<LogIndex>,
    pub kv: &'a KvStore,
    pub claims: Vec<LeaderClaim>,
    /// True while the node accepts client requests as the cluster leader.
    pub serving: bool,
}

/// A replica state machine driven by a simulator or model checker.
pub trait ProtocolNode: Clone + Debug {
    type Msg: Clone + Debug + PartialEq + Eq + PartialOrd + Ord + Hash + MessageInfo;

    /// Short protocol name, used in reports.
    const NAME: &'static str;

    fn id(&self) -> NodeId;

    fn on_message(&mut self, now: SimTime, from: Addr, payload: Payload<Self::Msg>, out: &mut Outbox<Self::Msg>);

    /// Fires every timer whose deadline is `<= now`.
    fn on_tick(&mut self, now: SimTime, out: &mut Outbox<Self::Msg>);

    /// Earliest pending deadline.
    fn next_deadline(&self) -> SimTime;

    /// Timers that could meaningfully fire in the current role.
    fn enabled_timeouts(&self) -> Vec<TimeoutKind>;

    /// Fires one abstract timer regardless of deadlines.
    fn fire_timeout(&mut self, now: SimTime, kind: TimeoutKind, out: &mut Outbox<Self::Msg>);

    /// Fail-stop crash followed by restart: persistent state survives,
    /// volatile state is rebuilt.
    fn restart(&mut self, now: SimTime);

    fn view(&self) -> NodeView<'_>;

    /// Hashes the protocol-relevant state, ignoring clocks and RNG state.
    fn fingerprint<H: Hasher>(&self, state: &mut H);

    /// Placement migrations performed by this node as leader.
    fn migrations(&self) -> u64 {
        0
    }
}
