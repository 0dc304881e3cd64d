//! Experiment harness: scenario files, simulation runs, reports,
//! comparisons, placement queries and model-check entry points.

pub mod check;
pub mod metrics;
pub mod run;
pub mod scenario;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::placement::{optimal_domain, DomainLoadProfile};
use crate::types::{DomainId, LatencyMatrix};

pub use check::{deepen, CheckSpec, DeepeningReport};
pub use metrics::{compare, CompareReport, LatencyStats, MetricsReport};
pub use run::{run, run_detailed, RunOutcome};
pub use scenario::{PlacementMode, Protocol, Scenario};

/// Latency input of `optimize`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyFile {
    /// One-way delays in ms; the diagonal is replaced by `intra_ms`.
    pub matrix: Vec<Vec<f64>>,
    #[serde(default = "default_intra")]
    pub intra_ms: f64,
    /// Domains (1-based) that cannot host the leader.
    #[serde(default)]
    pub unavailable: Vec<u16>,
}

fn default_intra() -> f64 {
    0.25
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub domain: u16,
    pub total: f64,
}

/// Latency totals are in milliseconds times requests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeReport {
    pub chosen: u16,
    pub total: f64,
    /// Per-domain latency with the chosen leader, in domain order.
    pub per_domain: Vec<f64>,
    pub candidates: Vec<CandidateScore>,
}

impl OptimizeReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("chosen domain {}  total {}\n", self.chosen, self.total);
        for c in &self.candidates {
            s.push_str(&format!("candidate {} total {}\n", c.domain, c.total));
        }
        for (i, l) in self.per_domain.iter().enumerate() {
            s.push_str(&format!("domain {} latency {}\n", i + 1, l));
        }
        s
    }
}

fn read_structured<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ConfigError> {
    let origin = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: origin.clone(), source })?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|message| ConfigError::Parse { path: origin, message })
}

/// Best leader domain for a latency file and a load file (TOML, or JSON by
/// extension).
pub fn optimize_files(latency: &Path, load: &Path) -> Result<OptimizeReport, ConfigError> {
    let lf: LatencyFile = read_structured(latency)?;
    let load: DomainLoadProfile = read_structured(load)?;
    optimize(&lf, &load)
}

pub fn optimize(lf: &LatencyFile, load: &DomainLoadProfile) -> Result<OptimizeReport, ConfigError> {
    let lm = LatencyMatrix::new(lf.matrix.clone(), lf.intra_ms)?;
    let n = lm.domain_count();
    if load.writes.len() != n || load.reads.len() != n {
        return Err(ConfigError::Invalid(format!("load needs {n} write and read counts")));
    }
    let mut avail = vec![true; n];
    for &d in &lf.unavailable {
        let slot = DomainId(d).slot();
        if d == 0 || slot >= n {
            return Err(ConfigError::Invalid(format!("unknown domain {d}")));
        }
        avail[slot] = false;
    }
    let eval = optimal_domain(&lm, load, &avail).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(OptimizeReport {
        chosen: eval.chosen.0,
        total: eval.total,
        per_domain: eval.per_domain_latency,
        candidates: eval.candidates.iter().map(|&(d, t)| CandidateScore { domain: d.0, total: t }).collect(),
    })
}
