//! Bounded exhaustive exploration of a cluster's nondeterminism.
//!
//! A state is every node plus the set of messages in flight. A step delivers
//! one message, crashes a node (it restarts at once from its persistent
//! state), fires an abstract timer, or invokes the next scripted client
//! operation. Time does not exist here: any enabled timer may fire, and
//! `now` passed to a node is the number of steps it has taken, in
//! milliseconds.
//!
//! Message loss is not enumerated as a step. Within a bounded schedule a lost
//! message leaves every node in the same state as one that is never
//! delivered, and the schedule without the loss is one step shorter, so
//! every schedule with losses is covered by one without. For the same reason
//! a crash keeps the messages addressed to the node in flight: delivering
//! them after the restart only adds behaviours. `max_drops` is therefore
//! covered for any value, and replay still accepts `drop` records.
//!
//! Steps at different nodes commute unless one consumes a message the other
//! sent, so the search enumerates sets of steps closed under that order
//! rather than interleavings. Each such set of at most `max_depth` steps is
//! visited once, through its lexicographic normal form: a step is only
//! appended if it cannot be moved before a later step of a higher-numbered
//! node.
//!
//! Checks must not depend on which interleaving represents a set. The
//! invariant monitor keeps its evidence across the whole path, and
//! durability is judged with vector clocks: a commit or acknowledgment
//! counts only copies of the entry that happen before it.
//!
//! Counterexamples are step schedules in the simulator's trace format, with
//! message ids numbering messages in creation order, and can be re-executed
//! with [`Explorer::replay`].

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use serde::Serialize;

use super::invariants::{DurabilityRule, SafetyMonitor, Violation};
use crate::error::TraceError;
use crate::protocol::{ClientOp, ClientRequest, ClientResult, MessageInfo, Outbox, Payload, ProtocolNode, TimeoutKind};
use crate::simnet::{TraceEvent, TraceRecord};
use crate::types::{Addr, ClientId, ClusterTopology, LogEntry, LogIndex, NodeId, RequestTag, SimTime, Term};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ExplorationBounds {
    /// Steps per schedule.
    pub max_depth: usize,
    pub max_drops: u8,
    pub max_crashes: u8,
    pub max_timeouts: u8,
    /// When false only heartbeat timers fire, so leadership never changes.
    pub elections: bool,
    /// Stop after executing this many steps and flag the result partial.
    pub max_states: usize,
}

impl Default for ExplorationBounds {
    fn default() -> Self {
        Self { max_depth: 14, max_drops: 2, max_crashes: 1, max_timeouts: 2, elections: true, max_states: 100_000_000 }
    }
}

/// A client operation the explorer may invoke, in script order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScriptedOp {
    pub client: ClientId,
    pub target: NodeId,
    pub op: ClientOp,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct ExploreReport {
    /// Steps executed, each producing one checked state.
    pub states_visited: u64,
    /// Complete schedules enumerated.
    pub schedules: u64,
    /// Longest path, in steps.
    pub deepest: usize,
    /// Acknowledged client writes seen on some explored path.
    pub writes_acknowledged: u64,
    /// True if the step cap stopped the search early.
    pub truncated: bool,
    pub violations: Vec<Violation>,
    /// Schedule reaching the first violation.
    #[serde(skip)]
    pub counterexample: Vec<TraceRecord>,
}

impl ExploreReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn counterexample_text(&self) -> String {
        self.counterexample.iter().map(|r| format!("{r}\n")).collect()
    }
}

type MsgId = u32;

#[derive(Clone, Debug)]
struct Msg<M> {
    id: MsgId,
    src: Addr,
    dst: usize,
    payload: Payload<M>,
    /// Sender's vector clock at the send.
    clock: Rc<[u32]>,
    /// Path position of the step that sent it.
    born: usize,
}

#[derive(Clone, Debug)]
struct State<N: ProtocolNode> {
    nodes: Vec<Rc<N>>,
    /// In creation order.
    flight: Vec<Msg<N::Msg>>,
    next_msg: MsgId,
    drops: u8,
    crashes: u8,
    timeouts: u8,
    next_op: usize,
    monitor: SafetyMonitor,
    /// Vector clock per node, plus one shared by all clients at the end.
    clocks: Vec<Rc<[u32]>>,
    /// Per node, the own-clock value since which it has held each entry.
    held: Vec<Rc<BTreeMap<(LogIndex, Term), u32>>>,
}

impl<N: ProtocolNode> State<N> {
    fn message(&self, id: MsgId) -> Option<usize> {
        self.flight.binary_search_by_key(&id, |m| m.id).ok()
    }

    /// Advances `actor`'s clock, first merging `seen` if given, and returns
    /// its local time.
    fn tick(&mut self, actor: usize, seen: Option<&[u32]>) -> SimTime {
        let mut c = self.clocks[actor].to_vec();
        if let Some(seen) = seen {
            for (a, b) in c.iter_mut().zip(seen) {
                *a = (*a).max(*b);
            }
        }
        c[actor] += 1;
        let now = SimTime::from_millis(u64::from(c[actor]));
        self.clocks[actor] = c.into();
        now
    }

    fn refresh_held(&mut self, n: usize) {
        let now = self.clocks[n][n];
        let log = self.nodes[n].view().log;
        let old = &self.held[n];
        let fresh: BTreeMap<_, _> =
            log.entries().iter().map(|e| ((e.index, e.term), old.get(&(e.index, e.term)).copied().unwrap_or(now))).collect();
        if fresh != **old {
            self.held[n] = Rc::new(fresh);
        }
    }

    /// Whether `holder`'s copy of `e` happens before `observer`'s latest step.
    fn precedes(&self, holder: usize, observer: usize, e: &LogEntry) -> bool {
        self.held[holder].get(&(e.index, e.term)).is_some_and(|&t| t <= self.clocks[observer][holder])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Proc {
    Invoke,
    Deliver(MsgId),
    Drop(MsgId),
    Timer(usize, TimeoutKind),
    Crash(usize),
}

/// What the normal-form test needs to know about a step.
#[derive(Clone, Copy, Debug)]
struct Step {
    /// Node index, or the node count for client steps.
    actor: usize,
    /// Path position of the step that sent the consumed message.
    creator: Option<usize>,
}

fn timeout_name(k: TimeoutKind) -> &'static str {
    match k {
        TimeoutKind::Election => "Election",
        TimeoutKind::GlobalElection => "GlobalElection",
        TimeoutKind::Heartbeat => "Heartbeat",
    }
}

pub struct Explorer<N: ProtocolNode> {
    initial: Vec<N>,
    ops: Vec<ScriptedOp>,
    bounds: ExplorationBounds,
    monitor: SafetyMonitor,
    index: HashMap<NodeId, usize>,
}

struct Frame<N: ProtocolNode> {
    state: State<N>,
    candidates: Vec<(Proc, Step)>,
    next: usize,
}

/// Outcome of one step.
struct Applied {
    record: TraceRecord,
    violations: Vec<Violation>,
    acks: u64,
}

impl<N: ProtocolNode> Explorer<N> {
    pub fn new(initial: Vec<N>, topology: ClusterTopology, rule: DurabilityRule, ops: Vec<ScriptedOp>, bounds: ExplorationBounds) -> Self {
        let index = initial.iter().enumerate().map(|(i, n)| (n.id(), i)).collect();
        Self { initial, ops, bounds, monitor: SafetyMonitor::new(topology, rule).with_state_machine_check(), index }
    }

    fn initial_state(&self) -> State<N> {
        let n = self.initial.len();
        let zero: Rc<[u32]> = vec![0; n + 1].into();
        let mut s = State {
            nodes: self.initial.iter().cloned().map(Rc::new).collect(),
            flight: Vec::new(),
            next_msg: 1,
            drops: 0,
            crashes: 0,
            timeouts: 0,
            next_op: 0,
            monitor: self.monitor.clone(),
            clocks: vec![zero; n + 1],
            held: vec![Rc::default(); n],
        };
        for i in 0..n {
            s.refresh_held(i);
        }
        s
    }

    fn enabled(&self, s: &State<N>) -> Vec<(Proc, Step)> {
        let b = &self.bounds;
        let n = s.nodes.len();
        let mut out = Vec::new();
        if s.next_op < self.ops.len() {
            out.push((Proc::Invoke, Step { actor: n, creator: None }));
        }
        for m in &s.flight {
            out.push((Proc::Deliver(m.id), Step { actor: m.dst, creator: Some(m.born) }));
        }
        if s.timeouts < b.max_timeouts {
            for (i, node) in s.nodes.iter().enumerate() {
                for k in node.enabled_timeouts() {
                    if b.elections || k == TimeoutKind::Heartbeat {
                        out.push((Proc::Timer(i, k), Step { actor: i, creator: None }));
                    }
                }
            }
        }
        if s.crashes < b.max_crashes {
            out.extend((0..n).map(|i| (Proc::Crash(i), Step { actor: i, creator: None })));
        }
        out
    }

    fn record(&self, event: TraceEvent, depth: usize, src: Addr, msg: Option<&Msg<N::Msg>>) -> TraceRecord {
        let request = |p: &Payload<N::Msg>| match p {
            Payload::Request(r) => Some(r.tag),
            Payload::Response(r) => Some(r.tag),
            Payload::Peer(_) => None,
        };
        TraceRecord {
            time: SimTime::from_millis(depth as u64),
            event,
            src,
            dst: msg.map(|m| Addr::Node(self.initial[m.dst].id())),
            variant: msg.map(|m| m.payload.variant().to_string()),
            size: msg.map(|m| m.payload.size_class()),
            id: msg.map(|m| u64::from(m.id)),
            cause: None,
            request: msg.and_then(|m| request(&m.payload)),
        }
    }

    /// Routes a node's output: peer messages go in flight, write
    /// acknowledgments are checked for durability. Returns violations and
    /// the number of acknowledged writes.
    fn emit(&self, s: &mut State<N>, from: usize, pos: usize, out: &mut Outbox<N::Msg>) -> (Vec<Violation>, u64) {
        s.refresh_held(from);
        let clock = s.clocks[from].clone();
        let mut violations = Vec::new();
        let mut acks = 0;
        for (dst, payload) in out.drain() {
            match payload {
                Payload::Response(r) => {
                    if r.result == ClientResult::WriteOk {
                        acks += 1;
                        let views: Vec<_> = s.nodes.iter().map(|n| n.view()).collect();
                        let past = |h: usize, o: usize, e: &LogEntry| s.precedes(h, o, e);
                        violations.extend(s.monitor.check_write_response_causal(&views, r.tag, from, Some(&past)));
                    }
                }
                payload => {
                    let Some(&dst) = dst.node().and_then(|n| self.index.get(&n)) else { continue };
                    let id = s.next_msg;
                    s.next_msg += 1;
                    let src = Addr::Node(self.initial[from].id());
                    s.flight.push(Msg { id, src, dst, payload, clock: clock.clone(), born: pos });
                }
            }
        }
        (violations, acks)
    }

    /// Executes one enabled step in place as path position `pos`.
    fn apply(&self, s: &mut State<N>, p: Proc, pos: usize) -> Applied {
        let depth = pos + 1;
        let mut out = Outbox::new();
        let mut violations = Vec::new();
        let mut acks = 0;
        let record = match p {
            Proc::Invoke => {
                let op = &self.ops[s.next_op];
                s.next_op += 1;
                let tag = RequestTag { client: op.client, req_id: s.next_op as u64 };
                let dst = self.index[&op.target];
                let id = s.next_msg;
                s.next_msg += 1;
                let client = s.nodes.len();
                s.tick(client, None);
                let payload = Payload::Request(ClientRequest { tag, op: op.op.clone() });
                let msg = Msg { id, src: Addr::Client(op.client), dst, payload, clock: s.clocks[client].clone(), born: pos };
                let record = self.record(TraceEvent::Send, depth, msg.src, Some(&msg));
                s.flight.push(msg);
                record
            }
            Proc::Deliver(m) => {
                let msg = s.flight.remove(s.message(m).expect("enabled message"));
                let record = self.record(TraceEvent::Deliver, depth, msg.src, Some(&msg));
                let now = s.tick(msg.dst, Some(&msg.clock));
                Rc::make_mut(&mut s.nodes[msg.dst]).on_message(now, msg.src, msg.payload, &mut out);
                (violations, acks) = self.emit(s, msg.dst, pos, &mut out);
                record
            }
            Proc::Drop(m) => {
                let msg = s.flight.remove(s.message(m).expect("enabled message"));
                s.drops += 1;
                self.record(TraceEvent::Drop, depth, msg.src, Some(&msg))
            }
            Proc::Crash(n) => {
                s.crashes += 1;
                let now = s.tick(n, None);
                Rc::make_mut(&mut s.nodes[n]).restart(now);
                s.refresh_held(n);
                self.record(TraceEvent::Crash, depth, Addr::Node(self.initial[n].id()), None)
            }
            Proc::Timer(n, kind) => {
                s.timeouts += 1;
                let now = s.tick(n, None);
                Rc::make_mut(&mut s.nodes[n]).fire_timeout(now, kind, &mut out);
                (violations, acks) = self.emit(s, n, pos, &mut out);
                let mut record = self.record(TraceEvent::Timeout, depth, Addr::Node(self.initial[n].id()), None);
                record.variant = Some(timeout_name(kind).to_string());
                record
            }
        };
        let views: Vec<_> = s.nodes.iter().map(|n| n.view()).collect();
        let (held, clocks) = (&s.held, &s.clocks);
        let past = |h: usize, o: usize, e: &LogEntry| held[h].get(&(e.index, e.term)).is_some_and(|&t| t <= clocks[o][h]);
        violations.extend(s.monitor.observe_causal(&views, Some(&past)));
        Applied { record, violations, acks }
    }

    /// Enabled steps whose addition keeps `path` in normal form.
    fn candidates(&self, s: &State<N>, path: &[Step]) -> Vec<(Proc, Step)> {
        if path.len() >= self.bounds.max_depth {
            return Vec::new();
        }
        let mut c = self.enabled(s);
        c.retain(|(_, step)| canonical(path, step));
        c
    }

    pub fn explore(&self) -> ExploreReport {
        let mut report = ExploreReport::default();
        let root = self.initial_state();
        let mut steps: Vec<Step> = Vec::new();
        let mut path: Vec<TraceRecord> = Vec::new();
        let mut frames = vec![Frame { candidates: self.candidates(&root, &steps), state: root, next: 0 }];
        while let Some(top) = frames.last_mut() {
            let Some(&(p, step)) = top.candidates.get(top.next) else {
                if top.candidates.is_empty() {
                    report.schedules += 1;
                }
                frames.pop();
                steps.pop();
                path.pop();
                continue;
            };
            top.next += 1;
            let mut state = top.state.clone();
            let applied = self.apply(&mut state, p, steps.len());
            report.states_visited += 1;
            report.writes_acknowledged += applied.acks;
            steps.push(step);
            path.push(applied.record);
            report.deepest = report.deepest.max(steps.len());
            if !applied.violations.is_empty() {
                report.violations = applied.violations;
                report.counterexample = path;
                return report;
            }
            if report.states_visited >= self.bounds.max_states as u64 {
                report.truncated = true;
                return report;
            }
            let candidates = self.candidates(&state, &steps);
            frames.push(Frame { state, candidates, next: 0 });
        }
        report
    }

    /// Re-executes a schedule produced by [`Explorer::explore`] and returns
    /// the violations found along it.
    pub fn replay(&self, schedule: &[TraceRecord]) -> Result<Vec<Violation>, TraceError> {
        let mut s = self.initial_state();
        for (k, rec) in schedule.iter().enumerate() {
            let fail = |reason: &str| TraceError::Replay { step: k, reason: reason.to_string() };
            let node = |a: Addr| a.node().and_then(|n| self.index.get(&n).copied()).ok_or_else(|| fail("unknown node"));
            let proc = match rec.event {
                TraceEvent::Send => {
                    let op = self.ops.get(s.next_op).ok_or_else(|| fail("no scripted operation left"))?;
                    if rec.src != Addr::Client(op.client) {
                        return Err(fail("operation invoked by the wrong client"));
                    }
                    Proc::Invoke
                }
                TraceEvent::Deliver | TraceEvent::Drop => {
                    let id = rec.id.ok_or_else(|| fail("missing message id"))? as MsgId;
                    let msg = s.message(id).map(|i| &s.flight[i]).ok_or_else(|| fail("no such message in flight"))?;
                    if msg.src != rec.src || Some(msg.payload.variant()) != rec.variant.as_deref() {
                        return Err(fail("message in flight does not match the record"));
                    }
                    if rec.event == TraceEvent::Deliver {
                        Proc::Deliver(id)
                    } else {
                        Proc::Drop(id)
                    }
                }
                TraceEvent::Crash => Proc::Crash(node(rec.src)?),
                TraceEvent::Timeout => {
                    let kind = match rec.variant.as_deref() {
                        Some("Election") => TimeoutKind::Election,
                        Some("GlobalElection") => TimeoutKind::GlobalElection,
                        Some("Heartbeat") => TimeoutKind::Heartbeat,
                        _ => return Err(fail("unknown timer")),
                    };
                    Proc::Timer(node(rec.src)?, kind)
                }
                TraceEvent::Restart | TraceEvent::Discard => continue,
            };
            let applied = self.apply(&mut s, proc, k);
            if !applied.violations.is_empty() {
                return Ok(applied.violations);
            }
        }
        Ok(Vec::new())
    }
}

/// True unless `step` commutes with a suffix of `path` that contains a step
/// of a higher-numbered actor, in which case the same set of steps is
/// reached through an ordering that places `step` earlier.
fn canonical(path: &[Step], step: &Step) -> bool {
    for (j, f) in path.iter().enumerate().rev() {
        if f.actor == step.actor || step.creator == Some(j) {
            return true;
        }
        if f.actor > step.actor {
            return false;
        }
    }
    true
}
