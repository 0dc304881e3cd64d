//! Deterministic discrete-event simulation of servers and clients connected
//! by a latency matrix, with scripted and random faults.
//!
//! Events are ordered by `(time, seq)`, where `seq` is a global insertion
//! counter, so equal-time events run in the order they were scheduled and a
//! run is a pure function of its inputs and seed.
//!
//! # Trace format
//!
//! One record per line, space separated:
//!
//! ```text
//! <time_us> <event> <src> <dst> <variant> <size_class> <id> <cause> <request>
//! ```
//!
//! `event` is one of `send`, `drop`, `deliver`, `discard` (destination down),
//! `crash`, `restart`, or `timeout` (model checker schedules only; `variant`
//! names the timer). `src`/`dst` are `n<domain>.<ordinal>` or
//! `c<domain>.<ordinal>`. `id` is the envelope id; `cause` is the id of the
//! envelope whose delivery triggered the send, or `-` when a timer or a
//! client started it. `request` is `c<d>.<o>#<req_id>` for client traffic and
//! `-` otherwise. Crash and restart records use `-` for every field but the
//! node (`src`).

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, TraceError};
use crate::protocol::{ClientRequest, ClientResponse, MessageInfo, Outbox, Payload, ProtocolNode, SizeClass};
use crate::types::{Addr, ClientId, DomainId, LatencyMatrix, NodeId, RequestTag, SimTime};

/// Link delays.
#[derive(Clone, Debug)]
pub struct NetworkModel {
    pub latency: LatencyMatrix,
    /// Standard deviation of the log of a multiplicative delay factor with
    /// median 1. `None` disables jitter.
    pub jitter_sigma: Option<f64>,
}

impl NetworkModel {
    pub fn new(latency: LatencyMatrix) -> Self {
        Self { latency, jitter_sigma: None }
    }
}

/// Drops matching messages. All present fields must match.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropRule {
    /// Message variant, e.g. `GlobalAppend` or `ClientWrite`.
    #[serde(default)]
    pub variant: Option<String>,
    /// Endpoint pattern: `n1.0`, `c2.0`, `d2` (any address in domain 2),
    /// `client` (any client) or `*`.
    #[serde(default)]
    pub src: Option<String>,
    #[serde(default)]
    pub dst: Option<String>,
    /// `data` or `ctl`.
    #[serde(default)]
    pub size: Option<String>,
    /// The first matching message to drop, 1-based.
    #[serde(default = "one")]
    pub occurrence: u64,
    /// How many consecutive matches to drop from `occurrence` on.
    #[serde(default = "one")]
    pub count: u64,
    /// Only messages sent at or after this time are counted.
    #[serde(default)]
    pub after_ms: f64,
}

fn one() -> u64 {
    1
}

impl Default for DropRule {
    /// Matches every message and drops the first one.
    fn default() -> Self {
        Self { variant: None, src: None, dst: None, size: None, occurrence: 1, count: 1, after_ms: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrashSpec {
    pub node: String,
    pub down_ms: f64,
    #[serde(default)]
    pub up_ms: Option<f64>,
}

/// Cuts both directions between two domains for `[from_ms, until_ms)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub a: u16,
    pub b: u16,
    pub from_ms: f64,
    pub until_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultScript {
    #[serde(default)]
    pub drops: Vec<DropRule>,
    #[serde(default)]
    pub crashes: Vec<CrashSpec>,
    #[serde(default)]
    pub partitions: Vec<PartitionSpec>,
    /// Independent loss probability applied to every message.
    #[serde(default)]
    pub drop_probability: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Endpoint {
    Any,
    AnyClient,
    Domain(DomainId),
    Exact(Addr),
}

impl Endpoint {
    fn parse(s: &str) -> Result<Self, ConfigError> {
        match s {
            "*" => Ok(Endpoint::Any),
            "client" => Ok(Endpoint::AnyClient),
            _ if s.starts_with('d') => {
                s[1..].parse().map(|d| Endpoint::Domain(DomainId(d))).map_err(|_| bad_endpoint(s))
            }
            _ => parse_addr(s).map(Endpoint::Exact).ok_or_else(|| bad_endpoint(s)),
        }
    }

    fn matches(self, a: Addr) -> bool {
        match self {
            Endpoint::Any => true,
            Endpoint::AnyClient => matches!(a, Addr::Client(_)),
            Endpoint::Domain(d) => a.domain() == d,
            Endpoint::Exact(x) => x == a,
        }
    }
}

fn bad_endpoint(s: &str) -> ConfigError {
    ConfigError::Invalid(format!("bad endpoint pattern {s:?}"))
}

/// Parses `n1.0` / `c1.0`.
pub fn parse_addr(s: &str) -> Option<Addr> {
    let (kind, rest) = s.split_at_checked(1)?;
    let (d, o) = rest.split_once('.')?;
    let domain = DomainId(d.parse().ok()?);
    let ordinal = o.parse().ok()?;
    match kind {
        "n" => Some(Addr::Node(NodeId { domain, ordinal })),
        "c" => Some(Addr::Client(ClientId { domain, ordinal })),
        _ => None,
    }
}

fn parse_tag(s: &str) -> Option<RequestTag> {
    let (c, r) = s.split_once('#')?;
    match parse_addr(c)? {
        Addr::Client(client) => Some(RequestTag { client, req_id: r.parse().ok()? }),
        Addr::Node(_) => None,
    }
}

#[derive(Clone, Debug)]
struct CompiledRule {
    variant: Option<String>,
    src: Endpoint,
    dst: Endpoint,
    size: Option<SizeClass>,
    first: u64,
    last: u64,
    after: SimTime,
    seen: u64,
}

impl CompiledRule {
    fn compile(r: &DropRule) -> Result<Self, ConfigError> {
        let endpoint = |p: &Option<String>| p.as_deref().map_or(Ok(Endpoint::Any), Endpoint::parse);
        let size = match r.size.as_deref() {
            None => None,
            Some("data") => Some(SizeClass::Data),
            Some("ctl") => Some(SizeClass::Control),
            Some(other) => return Err(ConfigError::Invalid(format!("bad size class {other:?}"))),
        };
        if r.occurrence == 0 {
            return Err(ConfigError::Invalid("drop occurrence is 1-based".into()));
        }
        Ok(Self {
            variant: r.variant.clone(),
            src: endpoint(&r.src)?,
            dst: endpoint(&r.dst)?,
            size,
            first: r.occurrence,
            last: r.occurrence + r.count.saturating_sub(1),
            after: SimTime::from_millis_f64(r.after_ms),
            seen: 0,
        })
    }

    /// Counts a matching message and reports whether it must be dropped.
    fn hit(&mut self, now: SimTime, src: Addr, dst: Addr, variant: &str, size: SizeClass) -> bool {
        let matches = now >= self.after
            && self.variant.as_deref().is_none_or(|v| v == variant)
            && self.size.is_none_or(|s| s == size)
            && self.src.matches(src)
            && self.dst.matches(dst);
        if !matches || self.seen >= self.last {
            return false;
        }
        self.seen += 1;
        self.seen >= self.first
    }
}

/// Outcome counters of a run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped_scripted: u64,
    pub dropped_random: u64,
    pub dropped_partition: u64,
    pub discarded_down: u64,
    pub crashes: u64,
    pub restarts: u64,
}

/// A message in flight.
#[derive(Clone, Debug)]
pub struct Envelope<M> {
    pub id: u64,
    /// Envelope whose delivery caused this one to be sent.
    pub cause: Option<u64>,
    /// Cross-domain hops on the causal chain up to and including this one.
    pub legs: u32,
    pub src: Addr,
    pub dst: Addr,
    pub payload: Payload<M>,
    pub send_time: SimTime,
    pub deliver_time: SimTime,
    dst_epoch: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceEvent {
    Send,
    Drop,
    Deliver,
    Discard,
    Crash,
    Restart,
    Timeout,
}

impl TraceEvent {
    fn as_str(self) -> &'static str {
        match self {
            TraceEvent::Send => "send",
            TraceEvent::Drop => "drop",
            TraceEvent::Deliver => "deliver",
            TraceEvent::Discard => "discard",
            TraceEvent::Crash => "crash",
            TraceEvent::Restart => "restart",
            TraceEvent::Timeout => "timeout",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "send" => TraceEvent::Send,
            "drop" => TraceEvent::Drop,
            "deliver" => TraceEvent::Deliver,
            "discard" => TraceEvent::Discard,
            "crash" => TraceEvent::Crash,
            "restart" => TraceEvent::Restart,
            "timeout" => TraceEvent::Timeout,
            _ => return None,
        })
    }
}

/// One line of a trace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRecord {
    pub time: SimTime,
    pub event: TraceEvent,
    pub src: Addr,
    pub dst: Option<Addr>,
    pub variant: Option<String>,
    pub size: Option<SizeClass>,
    pub id: Option<u64>,
    pub cause: Option<u64>,
    pub request: Option<RequestTag>,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn opt<T: fmt::Display>(v: &Option<T>) -> String {
            v.as_ref().map_or_else(|| "-".to_string(), T::to_string)
        }
        write!(
            f,
            "{} {} {} {} {} {} {} {} {}",
            self.time.0,
            self.event.as_str(),
            self.src,
            opt(&self.dst),
            self.variant.as_deref().unwrap_or("-"),
            self.size.map_or("-", SizeClass::as_str),
            opt(&self.id),
            opt(&self.cause),
            opt(&self.request),
        )
    }
}

impl TraceRecord {
    pub fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 9 {
            return None;
        }
        let dash = |s: &str| (s != "-").then(|| s.to_string());
        Some(Self {
            time: SimTime(f[0].parse().ok()?),
            event: TraceEvent::parse(f[1])?,
            src: parse_addr(f[2])?,
            dst: match f[3] {
                "-" => None,
                s => Some(parse_addr(s)?),
            },
            variant: dash(f[4]),
            size: match f[5] {
                "-" => None,
                "ctl" => Some(SizeClass::Control),
                "data" => Some(SizeClass::Data),
                _ => return None,
            },
            id: dash(f[6]).map(|s| s.parse()).transpose().ok()?,
            cause: dash(f[7]).map(|s| s.parse()).transpose().ok()?,
            request: match f[8] {
                "-" => None,
                s => Some(parse_tag(s)?),
            },
        })
    }
}

/// Cross-domain hops on the causal chain that ends with the first delivered
/// response to `tag` and starts at the request for `tag` that opened it.
pub fn rtt_legs(trace: &[TraceRecord], tag: RequestTag) -> Result<u32, TraceError> {
    let sends: BTreeMap<u64, &TraceRecord> = trace
        .iter()
        .filter(|r| r.event == TraceEvent::Send)
        .filter_map(|r| r.id.map(|id| (id, r)))
        .collect();
    let response = trace
        .iter()
        .find(|r| r.event == TraceEvent::Deliver && r.request == Some(tag) && r.variant.as_deref() == Some("ClientResponse"))
        .ok_or_else(|| TraceError::NoResponse(tag.to_string()))?;
    let mut legs = 0;
    let mut cur = response.id.and_then(|id| sends.get(&id).copied());
    while let Some(rec) = cur {
        if rec.dst.is_some_and(|d| d.domain() != rec.src.domain()) {
            legs += 1;
        }
        let is_request = matches!(rec.variant.as_deref(), Some("ClientWrite" | "ClientRead"));
        if is_request && rec.request == Some(tag) {
            return Ok(legs);
        }
        cur = rec.cause.and_then(|c| sends.get(&c).copied());
    }
    Err(TraceError::BrokenChain(tag.to_string()))
}

/// What a client wants done after handling an event.
#[derive(Clone, Debug, Default)]
pub struct ClientAction {
    pub send: Vec<(NodeId, ClientRequest)>,
    /// Absolute time of the client's next timer; replaces any earlier one.
    pub timer: Option<SimTime>,
}

/// A client process driven by the simulator.
pub trait ClientProcess {
    fn id(&self) -> ClientId;
    fn on_start(&mut self, now: SimTime) -> ClientAction;
    /// `legs` is the cross-domain hop count of the response's causal chain.
    fn on_response(&mut self, now: SimTime, resp: ClientResponse, legs: u32) -> ClientAction;
    fn on_timer(&mut self, now: SimTime) -> ClientAction;
    /// True once the client has nothing left to do.
    fn finished(&self) -> bool;
}

enum SimEvent<M> {
    Deliver(Envelope<M>),
    NodeTick(usize),
    ClientStart(usize),
    ClientTimer(usize, u64),
    Crash(usize),
    Restart(usize),
}

struct Scheduled<M> {
    time: SimTime,
    seq: u64,
    event: SimEvent<M>,
}

impl<M> PartialEq for Scheduled<M> {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl<M> Eq for Scheduled<M> {}

impl<M> PartialOrd for Scheduled<M> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<M> Ord for Scheduled<M> {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

/// The event loop.
pub struct Simulation<N: ProtocolNode, C: ClientProcess> {
    now: SimTime,
    nodes: Vec<N>,
    up: Vec<bool>,
    epoch: Vec<u64>,
    tick_at: Vec<SimTime>,
    node_slot: BTreeMap<NodeId, usize>,
    clients: Vec<C>,
    client_slot: BTreeMap<ClientId, usize>,
    client_timer: Vec<u64>,
    queue: BinaryHeap<Reverse<Scheduled<N::Msg>>>,
    seq: u64,
    next_envelope: u64,
    net: NetworkModel,
    jitter: Option<LogNormal<f64>>,
    rules: Vec<CompiledRule>,
    partitions: Vec<(DomainId, DomainId, SimTime, SimTime)>,
    drop_probability: f64,
    rng: ChaCha8Rng,
    trace: Option<Vec<TraceRecord>>,
    responses: Option<Vec<(usize, ClientResponse)>>,
    stats: NetStats,
}

impl<N: ProtocolNode, C: ClientProcess> Simulation<N, C> {
    pub fn new(nodes: Vec<N>, clients: Vec<C>, net: NetworkModel, faults: &FaultScript, seed: u64) -> Result<Self, ConfigError> {
        let node_slot: BTreeMap<NodeId, usize> = nodes.iter().enumerate().map(|(i, n)| (n.id(), i)).collect();
        let client_slot = clients.iter().enumerate().map(|(i, c)| (c.id(), i)).collect();
        let domains = net.latency.domain_count();
        let check_domain = |d: DomainId| {
            if d.0 == 0 || d.slot() >= domains {
                Err(ConfigError::Invalid(format!("domain {d} outside the latency matrix")))
            } else {
                Ok(())
            }
        };
        for n in node_slot.keys() {
            check_domain(n.domain)?;
        }
        if !(0.0..=1.0).contains(&faults.drop_probability) {
            return Err(ConfigError::Invalid("drop probability must lie in [0, 1]".into()));
        }
        let jitter = match net.jitter_sigma {
            Some(s) => Some(LogNormal::new(0.0, s).map_err(|e| ConfigError::Invalid(format!("jitter: {e}")))?),
            None => None,
        };
        let rules = faults.drops.iter().map(CompiledRule::compile).collect::<Result<Vec<_>, _>>()?;
        let mut partitions = Vec::new();
        for p in &faults.partitions {
            check_domain(DomainId(p.a))?;
            check_domain(DomainId(p.b))?;
            partitions.push((
                DomainId(p.a),
                DomainId(p.b),
                SimTime::from_millis_f64(p.from_ms),
                SimTime::from_millis_f64(p.until_ms),
            ));
        }
        let n = nodes.len();
        let mut sim = Self {
            now: SimTime::ZERO,
            nodes,
            up: vec![true; n],
            epoch: vec![0; n],
            tick_at: vec![SimTime::MAX; n],
            node_slot,
            client_timer: vec![0; clients.len()],
            clients,
            client_slot,
            queue: BinaryHeap::new(),
            seq: 0,
            next_envelope: 1,
            net,
            jitter,
            rules,
            partitions,
            drop_probability: faults.drop_probability,
            rng: ChaCha8Rng::seed_from_u64(seed),
            trace: None,
            responses: None,
            stats: NetStats::default(),
        };
        for c in &faults.crashes {
            let Some(Addr::Node(id)) = parse_addr(&c.node) else {
                return Err(ConfigError::Invalid(format!("crash target {:?} is not a node", c.node)));
            };
            let Some(&slot) = sim.node_slot.get(&id) else {
                return Err(ConfigError::Invalid(format!("crash target {id} not in topology")));
            };
            sim.push(SimTime::from_millis_f64(c.down_ms), SimEvent::Crash(slot));
            if let Some(up) = c.up_ms {
                if up < c.down_ms {
                    return Err(ConfigError::Invalid(format!("{id} restarts before it crashes")));
                }
                sim.push(SimTime::from_millis_f64(up), SimEvent::Restart(slot));
            }
        }
        for i in 0..n {
            sim.reschedule(i);
        }
        for i in 0..sim.clients.len() {
            sim.push(SimTime::ZERO, SimEvent::ClientStart(i));
        }
        Ok(sim)
    }

    /// Records every network event from now on.
    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> &[TraceRecord] {
        self.trace.as_deref().unwrap_or_default()
    }

    /// Starts collecting every client response a node emits, tagged with the
    /// node's position in [`Self::nodes`].
    pub fn enable_response_log(&mut self) {
        self.responses.get_or_insert_with(Vec::new);
    }

    /// Responses emitted since the last call.
    pub fn take_responses(&mut self) -> Vec<(usize, ClientResponse)> {
        self.responses.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn nodes(&self) -> &[N] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Option<&N> {
        self.node_slot.get(&id).map(|&i| &self.nodes[i])
    }

    pub fn is_up(&self, id: NodeId) -> bool {
        self.node_slot.get(&id).is_some_and(|&i| self.up[i])
    }

    pub fn clients(&self) -> &[C] {
        &self.clients
    }

    pub fn into_parts(self) -> (Vec<N>, Vec<C>, NetStats) {
        (self.nodes, self.clients, self.stats)
    }

    pub fn stats(&self) -> &NetStats {
        &self.stats
    }

    /// Time of the next queued event.
    pub fn next_event_time(&self) -> Option<SimTime> {
        self.queue.peek().map(|Reverse(ev)| ev.time)
    }

    pub fn clients_finished(&self) -> bool {
        self.clients.iter().all(C::finished)
    }

    fn push(&mut self, time: SimTime, event: SimEvent<N::Msg>) {
        self.seq += 1;
        self.queue.push(Reverse(Scheduled { time, seq: self.seq, event }));
    }

    fn record(&mut self, event: TraceEvent, env: &Envelope<N::Msg>) {
        if let Some(t) = &mut self.trace {
            let request = match &env.payload {
                Payload::Request(r) => Some(r.tag),
                Payload::Response(r) => Some(r.tag),
                Payload::Peer(_) => None,
            };
            t.push(TraceRecord {
                time: self.now,
                event,
                src: env.src,
                dst: Some(env.dst),
                variant: Some(env.payload.variant().to_string()),
                size: Some(env.payload.size_class()),
                id: Some(env.id),
                cause: env.cause,
                request,
            });
        }
    }

    fn record_node(&mut self, event: TraceEvent, node: NodeId) {
        if let Some(t) = &mut self.trace {
            t.push(TraceRecord {
                time: self.now,
                event,
                src: Addr::Node(node),
                dst: None,
                variant: None,
                size: None,
                id: None,
                cause: None,
                request: None,
            });
        }
    }

    fn partitioned(&self, a: DomainId, b: DomainId) -> bool {
        a != b
            && self
                .partitions
                .iter()
                .any(|&(x, y, from, until)| ((x, y) == (a, b) || (x, y) == (b, a)) && self.now >= from && self.now < until)
    }

    fn delay(&mut self, a: DomainId, b: DomainId) -> SimTime {
        let base = self.net.latency.one_way(a, b);
        let ms = match &self.jitter {
            Some(j) => base * j.sample(&mut self.rng),
            None => base,
        };
        SimTime::from_millis_f64(ms).max(SimTime(1))
    }

    /// Sends one message, applying the loss model.
    fn send(&mut self, src: Addr, dst: Addr, payload: Payload<N::Msg>, cause: Option<(u64, u32)>) {
        let id = self.next_envelope;
        self.next_envelope += 1;
        let cross = u32::from(src.domain() != dst.domain());
        let deliver_time = self.now + self.delay(src.domain(), dst.domain());
        let dst_epoch = match dst {
            Addr::Node(n) => self.node_slot.get(&n).map_or(0, |&i| self.epoch[i]),
            Addr::Client(_) => 0,
        };
        let env = Envelope {
            id,
            cause: cause.map(|c| c.0),
            legs: cause.map_or(0, |c| c.1) + cross,
            src,
            dst,
            payload,
            send_time: self.now,
            deliver_time,
            dst_epoch,
        };
        self.stats.sent += 1;
        self.record(TraceEvent::Send, &env);
        let (variant, size) = (env.payload.variant(), env.payload.size_class());
        let now = self.now;
        let mut scripted = false;
        for r in &mut self.rules {
            scripted |= r.hit(now, src, dst, variant, size);
        }
        let dropped = if scripted {
            self.stats.dropped_scripted += 1;
            true
        } else if self.partitioned(src.domain(), dst.domain()) {
            self.stats.dropped_partition += 1;
            true
        } else if self.drop_probability > 0.0 && self.rng.random_bool(self.drop_probability) {
            self.stats.dropped_random += 1;
            true
        } else {
            false
        };
        if dropped {
            self.record(TraceEvent::Drop, &env);
        } else {
            self.push(deliver_time, SimEvent::Deliver(env));
        }
    }

    fn emit(&mut self, src: NodeId, cause: Option<(u64, u32)>, mut out: Outbox<N::Msg>) {
        for (dst, payload) in out.drain() {
            if let (Some(log), Payload::Response(r)) = (&mut self.responses, &payload) {
                log.push((self.node_slot[&src], r.clone()));
            }
            self.send(Addr::Node(src), dst, payload, cause);
        }
    }

    fn apply_client(&mut self, i: usize, action: ClientAction) {
        let src = Addr::Client(self.clients[i].id());
        for (node, req) in action.send {
            self.send(src, Addr::Node(node), Payload::Request(req), None);
        }
        if let Some(t) = action.timer {
            self.client_timer[i] += 1;
            let generation = self.client_timer[i];
            self.push(t.max(self.now), SimEvent::ClientTimer(i, generation));
        }
    }

    fn reschedule(&mut self, i: usize) {
        if !self.up[i] {
            return;
        }
        let d = self.nodes[i].next_deadline();
        if d < self.tick_at[i] {
            self.tick_at[i] = d;
            self.push(d.max(self.now), SimEvent::NodeTick(i));
        }
    }

    /// Processes one event. Returns `false` when nothing is left.
    pub fn step(&mut self) -> bool {
        let Some(Reverse(ev)) = self.queue.pop() else { return false };
        debug_assert!(ev.time >= self.now, "time went backwards");
        self.now = ev.time;
        match ev.event {
            SimEvent::Deliver(env) => self.deliver(env),
            SimEvent::NodeTick(i) => {
                if self.up[i] && self.tick_at[i] == ev.time {
                    self.tick_at[i] = SimTime::MAX;
                    if self.nodes[i].next_deadline() <= self.now {
                        let mut out = Outbox::new();
                        self.nodes[i].on_tick(self.now, &mut out);
                        let id = self.nodes[i].id();
                        self.emit(id, None, out);
                    }
                    self.reschedule(i);
                }
            }
            SimEvent::ClientStart(i) => {
                let action = self.clients[i].on_start(self.now);
                self.apply_client(i, action);
            }
            SimEvent::ClientTimer(i, generation) => {
                if self.client_timer[i] == generation {
                    let action = self.clients[i].on_timer(self.now);
                    self.apply_client(i, action);
                }
            }
            SimEvent::Crash(i) => {
                if self.up[i] {
                    self.up[i] = false;
                    self.epoch[i] += 1;
                    self.tick_at[i] = SimTime::MAX;
                    self.stats.crashes += 1;
                    let id = self.nodes[i].id();
                    self.record_node(TraceEvent::Crash, id);
                }
            }
            SimEvent::Restart(i) => {
                if !self.up[i] {
                    self.up[i] = true;
                    self.epoch[i] += 1;
                    self.nodes[i].restart(self.now);
                    self.stats.restarts += 1;
                    let id = self.nodes[i].id();
                    self.record_node(TraceEvent::Restart, id);
                    self.reschedule(i);
                }
            }
        }
        true
    }

    fn deliver(&mut self, env: Envelope<N::Msg>) {
        match env.dst {
            Addr::Node(n) => {
                let Some(&i) = self.node_slot.get(&n) else { return };
                if !self.up[i] || self.epoch[i] != env.dst_epoch {
                    self.stats.discarded_down += 1;
                    self.record(TraceEvent::Discard, &env);
                    return;
                }
                self.stats.delivered += 1;
                self.record(TraceEvent::Deliver, &env);
                let cause = Some((env.id, env.legs));
                let mut out = Outbox::new();
                self.nodes[i].on_message(self.now, env.src, env.payload, &mut out);
                self.emit(n, cause, out);
                self.reschedule(i);
            }
            Addr::Client(c) => {
                let Some(&i) = self.client_slot.get(&c) else { return };
                self.stats.delivered += 1;
                self.record(TraceEvent::Deliver, &env);
                if let Payload::Response(resp) = env.payload {
                    let action = self.clients[i].on_response(self.now, resp, env.legs);
                    self.apply_client(i, action);
                }
            }
        }
    }

    /// Runs until every client finished or `limit` is reached. Returns
    /// whether the clients finished.
    pub fn run_until_done(&mut self, limit: SimTime) -> bool {
        while !self.clients_finished() {
            match self.queue.peek() {
                Some(Reverse(ev)) if ev.time <= limit => {
                    self.step();
                }
                _ => return false,
            }
        }
        true
    }

    /// Runs every event up to and including `until`.
    pub fn run_until(&mut self, until: SimTime) {
        while self.queue.peek().is_some_and(|Reverse(ev)| ev.time <= until) {
            self.step();
        }
        self.now = self.now.max(until);
    }
}
