//! Scenario files: the TOML schema that describes one simulated experiment.
//!
//! ```toml
//! name = "symmetric-load"
//!
//! [run]
//! protocol = "cdraft"          # or "raft"
//! seed = 7
//! duration_ms = 600000         # simulated-time limit
//! check_invariants = false     # safety monitor after every event
//! check_linearizability = false
//!
//! [topology]
//! domains = 3
//! nodes_per_domain = 3         # or: nodes = [3, 3, 5]
//!
//! [latency]
//! inter_ms = 15.0              # or: matrix = [[0, 10, 20], [10, 0, 15], [20, 15, 0]]
//! intra_ms = 0.25
//! jitter_sigma = 0.1           # optional log-normal delay jitter
//!
//! [workload]
//! kind = "Load"                # Load, A, B, C
//! ops_per_client = 10000
//!
//! [faults]
//! drop_probability = 0.0
//! drops = [{ variant = "GlobalAppend", occurrence = 1 }]
//! crashes = [{ node = "n2.1", down_ms = 100.0, up_ms = 400.0 }]
//!
//! [placement]
//! mode = "optimal"             # or "fixed" with leader_domain = 1
//! migrate = false              # periodic re-evaluation (CD-Raft only)
//! min_ratio = 100.0
//!
//! [timing]                     # optional protocol and client timers
//! domain_heartbeat_ms = 5.0
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::placement::{optimal_domain, DomainLoadProfile, PlacementPolicy};
use crate::simnet::FaultScript;
use crate::types::{ClusterTopology, DomainId, LatencyMatrix, SimTime};
use crate::workload::{WorkloadKind, WorkloadSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Cdraft,
    Raft,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Cdraft => "cdraft",
            Protocol::Raft => "raft",
        }
    }
}

fn default_protocol() -> Protocol {
    Protocol::Cdraft
}

fn default_duration() -> f64 {
    3_600_000.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_protocol")]
    pub protocol: Protocol,
    #[serde(default)]
    pub seed: u64,
    /// Simulated time after which the run stops even if clients are busy.
    #[serde(default = "default_duration")]
    pub duration_ms: f64,
    #[serde(default)]
    pub check_invariants: bool,
    #[serde(default)]
    pub check_linearizability: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            protocol: Protocol::Cdraft,
            seed: 0,
            duration_ms: default_duration(),
            check_invariants: false,
            check_linearizability: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySection {
    #[serde(default)]
    pub domains: Option<usize>,
    #[serde(default)]
    pub nodes_per_domain: Option<u16>,
    /// Node count of each domain; overrides the two fields above.
    #[serde(default)]
    pub nodes: Vec<u16>,
}

fn default_intra() -> f64 {
    0.25
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencySection {
    /// One-way delay between any two domains.
    #[serde(default)]
    pub inter_ms: Option<f64>,
    /// Full one-way matrix; overrides `inter_ms`.
    #[serde(default)]
    pub matrix: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_intra")]
    pub intra_ms: f64,
    #[serde(default)]
    pub jitter_sigma: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlacementMode {
    #[default]
    Fixed,
    /// Leader domain chosen by the latency model from the workload's
    /// expected per-domain load.
    Optimal,
}

fn default_leader() -> u16 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacementSection {
    #[serde(default)]
    pub mode: PlacementMode,
    /// Leader domain under `fixed`.
    #[serde(default = "default_leader")]
    pub leader_domain: u16,
    /// Re-evaluate placement periodically and migrate the global leader.
    #[serde(default)]
    pub migrate: bool,
    /// Re-evaluation period; defaults to `min_ratio` times the largest RTT.
    #[serde(default)]
    pub period_ms: Option<f64>,
    #[serde(default = "default_ratio")]
    pub min_ratio: f64,
}

fn default_ratio() -> f64 {
    PlacementPolicy::DEFAULT_RATIO
}

impl Default for PlacementSection {
    fn default() -> Self {
        Self { mode: PlacementMode::Fixed, leader_domain: 1, migrate: false, period_ms: None, min_ratio: default_ratio() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingSection {
    #[serde(default)]
    pub domain_heartbeat_ms: Option<f64>,
    #[serde(default)]
    pub global_heartbeat_ms: Option<f64>,
    /// Election timeout range in heartbeat intervals.
    #[serde(default)]
    pub election_ticks: Option<(u64, u64)>,
    #[serde(default)]
    pub client_retry_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub run: RunSection,
    pub topology: TopologySection,
    pub latency: LatencySection,
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub faults: FaultScript,
    #[serde(default)]
    pub placement: PlacementSection,
    #[serde(default)]
    pub timing: TimingSection,
}

impl Scenario {
    /// A fault-free symmetric scenario.
    pub fn symmetric(protocol: Protocol, domains: usize, nodes: u16, inter_ms: f64, workload: WorkloadSpec) -> Self {
        Self {
            name: String::new(),
            run: RunSection { protocol, ..RunSection::default() },
            topology: TopologySection { domains: Some(domains), nodes_per_domain: Some(nodes), nodes: Vec::new() },
            latency: LatencySection { inter_ms: Some(inter_ms), matrix: None, intra_ms: default_intra(), jitter_sigma: None },
            workload,
            faults: FaultScript::default(),
            placement: PlacementSection::default(),
            timing: TimingSection::default(),
        }
    }

    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let s: Scenario =
            toml::from_str(text).map_err(|e| ConfigError::Parse { path: origin.to_string(), message: e.to_string() })?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let origin = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: origin.clone(), source })?;
        Self::from_toml(&text, &origin)
    }

    pub fn topology(&self) -> Result<ClusterTopology, ConfigError> {
        let t = &self.topology;
        if !t.nodes.is_empty() {
            return ClusterTopology::new(t.nodes.clone());
        }
        match (t.domains, t.nodes_per_domain) {
            (Some(d), Some(n)) => ClusterTopology::uniform(d, n),
            _ => Err(ConfigError::Invalid("topology needs `nodes` or both `domains` and `nodes_per_domain`".into())),
        }
    }

    pub fn latency_matrix(&self) -> Result<LatencyMatrix, ConfigError> {
        let l = &self.latency;
        match (&l.matrix, l.inter_ms) {
            (Some(m), _) => LatencyMatrix::new(m.clone(), l.intra_ms),
            (None, Some(inter)) => LatencyMatrix::symmetric(self.topology()?.domain_count(), inter, l.intra_ms),
            (None, None) => Err(ConfigError::Invalid("latency needs `matrix` or `inter_ms`".into())),
        }
    }

    /// Per-domain request counts the workload is expected to produce.
    pub fn expected_load(&self) -> Result<DomainLoadProfile, ConfigError> {
        let topo = self.topology()?;
        let n = topo.domain_count();
        let w = &self.workload;
        let wf = w.kind.write_fraction();
        let mut load = DomainLoadProfile::new(n);
        for d in topo.domains() {
            let ops = (w.ops_for_client_in(d, n) * u64::from(w.clients_per_domain)) as f64;
            load.writes[d.slot()] = (ops * wf).round() as u64;
            load.reads[d.slot()] = (ops * (1.0 - wf)).round() as u64;
        }
        Ok(load)
    }

    /// The leader domain at start.
    pub fn leader_domain(&self) -> Result<DomainId, ConfigError> {
        let topo = self.topology()?;
        match self.placement.mode {
            PlacementMode::Fixed => {
                let d = DomainId(self.placement.leader_domain);
                if !topo.contains_domain(d) || !topo.is_available(d) {
                    return Err(ConfigError::Invalid(format!("leader domain {d} is not an available domain")));
                }
                Ok(d)
            }
            PlacementMode::Optimal => {
                let eval = optimal_domain(&self.latency_matrix()?, &self.expected_load()?, &topo.availability())
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
                Ok(eval.chosen)
            }
        }
    }

    /// The migration policy, validated against the matrix.
    pub fn placement_policy(&self) -> Result<PlacementPolicy, ConfigError> {
        let lm = self.latency_matrix()?;
        let p = &self.placement;
        let policy = match p.period_ms {
            Some(ms) => PlacementPolicy { period: SimTime::from_millis_f64(ms), min_ratio: p.min_ratio },
            None => PlacementPolicy::for_matrix(&lm, p.min_ratio),
        };
        policy.validate_all(&lm).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let topo = self.topology()?;
        let lm = self.latency_matrix()?;
        if lm.domain_count() != topo.domain_count() {
            return Err(ConfigError::Invalid(format!(
                "latency matrix has {} domains, topology {}",
                lm.domain_count(),
                topo.domain_count()
            )));
        }
        self.workload.validate(topo.domain_count())?;
        if !(self.run.duration_ms > 0.0 && self.run.duration_ms.is_finite()) {
            return Err(ConfigError::Invalid("duration_ms must be positive".into()));
        }
        if let Some(s) = self.latency.jitter_sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(ConfigError::Invalid("jitter_sigma must be a non-negative number".into()));
            }
        }
        self.leader_domain()?;
        if self.placement.migrate {
            if self.run.protocol == Protocol::Raft {
                return Err(ConfigError::Invalid("leader migration is only defined for cdraft".into()));
            }
            self.placement_policy()?;
        } else if self.placement.period_ms.is_some() {
            self.placement_policy()?;
        }
        if let Some((lo, hi)) = self.timing.election_ticks {
            if lo == 0 || lo > hi {
                return Err(ConfigError::Invalid("election_ticks must be a non-empty range of positive ticks".into()));
            }
        }
        Ok(())
    }

    /// True when every request is a write.
    pub fn write_only(&self) -> bool {
        self.workload.kind == WorkloadKind::Load
    }
}
