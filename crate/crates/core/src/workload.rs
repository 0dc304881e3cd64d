//! YCSB-style request generation and the closed-loop client that issues the
//! requests inside the simulator.

use bytes::{BufMut, Bytes, BytesMut};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::protocol::{ClientOp, ClientRequest, ClientResponse, ClientResult};
use crate::simnet::{ClientAction, ClientProcess};
use crate::types::{ClientId, DomainId, NodeId, RequestTag, SimTime};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WorkloadKind {
    /// Insert-only: every operation writes a fresh key.
    Load,
    /// 50% update, 50% read.
    A,
    /// 5% update, 95% read.
    B,
    /// Read-only.
    C,
}

impl WorkloadKind {
    pub fn write_fraction(self) -> f64 {
        match self {
            WorkloadKind::Load => 1.0,
            WorkloadKind::A => 0.5,
            WorkloadKind::B => 0.05,
            WorkloadKind::C => 0.0,
        }
    }
}

fn default_key_size() -> usize {
    16
}

fn default_value_size() -> usize {
    1024
}

fn default_theta() -> f64 {
    0.99
}

fn default_clients() -> u16 {
    1
}

fn default_keys() -> u64 {
    10_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    /// Operations per client under a uniform share; with a skewed share a
    /// domain's clients split `ops_per_client * total_clients * share` ops.
    pub ops_per_client: u64,
    #[serde(default = "default_keys")]
    pub key_count: u64,
    #[serde(default = "default_key_size")]
    pub key_size: usize,
    #[serde(default = "default_value_size")]
    pub value_size: usize,
    #[serde(default = "default_theta")]
    pub zipf_theta: f64,
    /// Fraction of all requests issued from each domain, in domain order.
    /// Empty means uniform.
    #[serde(default)]
    pub domain_share: Vec<f64>,
    #[serde(default = "default_clients")]
    pub clients_per_domain: u16,
}

impl WorkloadSpec {
    pub fn new(kind: WorkloadKind, ops_per_client: u64) -> Self {
        Self {
            kind,
            ops_per_client,
            key_count: default_keys(),
            key_size: default_key_size(),
            value_size: default_value_size(),
            zipf_theta: default_theta(),
            domain_share: Vec::new(),
            clients_per_domain: default_clients(),
        }
    }

    pub fn validate(&self, domains: usize) -> Result<(), ConfigError> {
        if !self.domain_share.is_empty() {
            if self.domain_share.len() != domains {
                return Err(ConfigError::Invalid(format!(
                    "domain_share has {} entries for {domains} domains",
                    self.domain_share.len()
                )));
            }
            if self.domain_share.iter().any(|&s| !(0.0..=1.0).contains(&s)) {
                return Err(ConfigError::Invalid("domain shares must lie in [0, 1]".into()));
            }
            let sum: f64 = self.domain_share.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(ConfigError::Invalid(format!("domain shares sum to {sum}, expected 1")));
            }
        }
        if self.key_count == 0 || self.key_size < 8 {
            return Err(ConfigError::Invalid("need at least one key of at least 8 bytes".into()));
        }
        if !(self.zipf_theta >= 0.0 && self.zipf_theta.is_finite()) {
            return Err(ConfigError::Invalid("zipf_theta must be a non-negative number".into()));
        }
        if self.clients_per_domain == 0 {
            return Err(ConfigError::Invalid("clients_per_domain must be positive".into()));
        }
        Ok(())
    }

    pub fn share(&self, d: DomainId, domains: usize) -> f64 {
        if self.domain_share.is_empty() {
            1.0 / domains as f64
        } else {
            self.domain_share[d.slot()]
        }
    }

    /// Operation count of each client in domain `d`.
    pub fn ops_for_client_in(&self, d: DomainId, domains: usize) -> u64 {
        let total = self.ops_per_client as f64 * domains as f64;
        (total * self.share(d, domains)).round() as u64
    }
}

/// Encodes key number `k` as `user` followed by zero-padded digits, `size`
/// bytes long unless `k` needs more digits.
pub fn key_bytes(k: u64, size: usize) -> Bytes {
    Bytes::from(format!("user{k:0>width$}", width = size.saturating_sub(4)))
}

/// Deterministic operation stream of one client.
#[derive(Clone, Debug)]
pub struct OpGenerator {
    spec: WorkloadSpec,
    client: ClientId,
    rng: ChaCha8Rng,
    zipf: Zipf<f64>,
    inserted: u64,
    insert_stride: u64,
    insert_base: u64,
}

impl OpGenerator {
    /// `slot` and `clients` spread fresh insert keys of different clients
    /// apart.
    pub fn new(spec: &WorkloadSpec, client: ClientId, slot: u64, clients: u64, seed: u64) -> Self {
        let zipf = Zipf::new(spec.key_count as f64, spec.zipf_theta).expect("validated workload");
        let mix = seed ^ (u64::from(client.domain.0) << 40 | u64::from(client.ordinal) << 24).wrapping_mul(0xA24B_AED4_963E_E407);
        Self {
            spec: spec.clone(),
            client,
            rng: ChaCha8Rng::seed_from_u64(mix),
            zipf,
            inserted: 0,
            insert_stride: clients.max(1),
            insert_base: slot,
        }
    }

    /// A key drawn from the Zipf popularity distribution, rank 0 hottest.
    pub fn zipf_key(&mut self) -> u64 {
        self.zipf.sample(&mut self.rng) as u64 - 1
    }

    pub fn value(&self, req_id: u64) -> Bytes {
        let mut v = BytesMut::with_capacity(self.spec.value_size);
        v.put_slice(format!("{}#{}:", self.client, req_id).as_bytes());
        if v.len() < self.spec.value_size {
            v.resize(self.spec.value_size, b'.');
        }
        v.freeze()
    }

    pub fn next_op(&mut self, req_id: u64) -> ClientOp {
        let size = self.spec.key_size;
        match self.spec.kind {
            WorkloadKind::Load => {
                let k = self.insert_base + self.inserted * self.insert_stride;
                self.inserted += 1;
                ClientOp::Put { key: key_bytes(k, size), value: self.value(req_id) }
            }
            kind => {
                let write = self.rng.random_bool(kind.write_fraction());
                let key = key_bytes(self.zipf_key(), size);
                if write {
                    ClientOp::Put { key, value: self.value(req_id) }
                } else {
                    ClientOp::Get { key }
                }
            }
        }
    }
}

/// One client operation as observed by the client.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpRecord {
    pub tag: RequestTag,
    pub op: ClientOp,
    pub invoke: SimTime,
    /// `None` if the run ended before an answer arrived.
    pub complete: Option<SimTime>,
    pub result: Option<ClientResult>,
    /// Cross-domain hops on the causal chain of the accepted response.
    pub legs: u32,
    pub attempts: u32,
}

impl OpRecord {
    pub fn latency(&self) -> Option<SimTime> {
        self.complete.map(|c| c - self.invoke)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClientTiming {
    /// Resend after this long without an answer.
    pub retry_timeout: SimTime,
    /// Pause before retrying when nobody knows the leader.
    pub backoff: SimTime,
    /// Stop issuing new operations after this time.
    pub stop_at: SimTime,
}

impl Default for ClientTiming {
    fn default() -> Self {
        Self { retry_timeout: SimTime::from_millis(500), backoff: SimTime::from_millis(20), stop_at: SimTime::MAX }
    }
}

/// One outstanding request at a time; retries on timeout, follows
/// redirects, and accepts only the first answer per request.
#[derive(Clone, Debug)]
pub struct ClosedLoopClient {
    id: ClientId,
    generator: OpGenerator,
    remaining: u64,
    next_req: u64,
    servers: Vec<NodeId>,
    target: NodeId,
    timing: ClientTiming,
    outstanding: Option<OpRecord>,
    redirects: u32,
    records: Vec<OpRecord>,
}

impl ClosedLoopClient {
    pub fn new(id: ClientId, generator: OpGenerator, ops: u64, servers: Vec<NodeId>, first_target: NodeId, timing: ClientTiming) -> Self {
        assert!(!servers.is_empty());
        Self {
            id,
            generator,
            remaining: ops,
            next_req: 1,
            servers,
            target: first_target,
            timing,
            outstanding: None,
            redirects: 0,
            records: Vec::new(),
        }
    }

    /// Completed operations, followed by the one still pending if any.
    pub fn history(&self) -> Vec<OpRecord> {
        self.records.iter().cloned().chain(self.outstanding.clone()).collect()
    }

    pub fn completed(&self) -> &[OpRecord] {
        &self.records
    }

    fn rotate(&mut self) {
        let pos = self.servers.iter().position(|&s| s == self.target).map_or(0, |p| p + 1);
        self.target = self.servers[pos % self.servers.len()];
    }

    fn send_current(&mut self, now: SimTime) -> ClientAction {
        let rec = self.outstanding.as_mut().expect("request outstanding");
        rec.attempts += 1;
        ClientAction {
            send: vec![(self.target, ClientRequest { tag: rec.tag, op: rec.op.clone() })],
            timer: Some(now + self.timing.retry_timeout),
        }
    }

    fn start_next(&mut self, now: SimTime) -> ClientAction {
        if self.remaining == 0 || now >= self.timing.stop_at {
            self.remaining = 0;
            return ClientAction::default();
        }
        self.remaining -= 1;
        let req_id = self.next_req;
        self.next_req += 1;
        let op = self.generator.next_op(req_id);
        self.outstanding = Some(OpRecord {
            tag: RequestTag { client: self.id, req_id },
            op,
            invoke: now,
            complete: None,
            result: None,
            legs: 0,
            attempts: 0,
        });
        self.redirects = 0;
        self.send_current(now)
    }
}

impl ClientProcess for ClosedLoopClient {
    fn id(&self) -> ClientId {
        self.id
    }

    fn on_start(&mut self, now: SimTime) -> ClientAction {
        self.start_next(now)
    }

    fn on_response(&mut self, now: SimTime, resp: ClientResponse, legs: u32) -> ClientAction {
        let Some(rec) = self.outstanding.as_mut() else { return ClientAction::default() };
        if rec.tag != resp.tag {
            return ClientAction::default();
        }
        match resp.result {
            ClientResult::Redirect(hint) => {
                self.redirects += 1;
                match hint {
                    Some(n) if self.redirects <= 3 => {
                        self.target = n;
                        self.send_current(now)
                    }
                    _ => {
                        match hint {
                            Some(n) => self.target = n,
                            None => self.rotate(),
                        }
                        self.redirects = 0;
                        ClientAction { send: Vec::new(), timer: Some(now + self.timing.backoff) }
                    }
                }
            }
            result => {
                rec.complete = Some(now);
                rec.result = Some(result);
                rec.legs = legs;
                let done = self.outstanding.take().expect("checked");
                self.records.push(done);
                self.start_next(now)
            }
        }
    }

    fn on_timer(&mut self, now: SimTime) -> ClientAction {
        let Some(rec) = self.outstanding.as_ref() else { return ClientAction::default() };
        if rec.attempts >= 2 && rec.attempts % 2 == 0 {
            self.rotate();
        }
        self.send_current(now)
    }

    fn finished(&self) -> bool {
        self.remaining == 0 && self.outstanding.is_none()
    }
}
