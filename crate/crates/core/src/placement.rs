//! Global leader placement: the cross-domain latency model that scores each
//! candidate leader domain from per-domain request counts and inter-domain
//! latencies, the argmin over candidates, and the periodic migration policy.

use serde::{Deserialize, Serialize};

use crate::error::PlacementError;
use crate::types::{DomainId, LatencyMatrix, SimTime};

/// Request counts per domain observed over one window.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainLoadProfile {
    /// `W_i`, indexed by domain slot.
    pub writes: Vec<u64>,
    /// `R_i`, indexed by domain slot.
    pub reads: Vec<u64>,
    #[serde(default)]
    pub window_ms: f64,
}

impl DomainLoadProfile {
    pub fn new(domains: usize) -> Self {
        Self { writes: vec![0; domains], reads: vec![0; domains], window_ms: 0.0 }
    }

    pub fn record_write(&mut self, d: DomainId) {
        self.writes[d.slot()] += 1;
    }

    pub fn record_read(&mut self, d: DomainId) {
        self.reads[d.slot()] += 1;
    }

    pub fn clear(&mut self) {
        self.writes.iter_mut().for_each(|w| *w = 0);
        self.reads.iter_mut().for_each(|r| *r = 0);
    }

    pub fn total(&self) -> u64 {
        self.writes.iter().sum::<u64>() + self.reads.iter().sum::<u64>()
    }
}

/// Outcome of scoring one or all candidate leader domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementEvaluation {
    /// The leader domain `z` this evaluation is for.
    pub chosen: DomainId,
    /// `L_i` for every domain, indexed by slot, given `z = chosen`.
    pub per_domain_latency: Vec<f64>,
    /// `L_s`, the sum of `per_domain_latency`.
    pub total: f64,
    /// `L_s` for every feasible candidate `z` that was scored.
    pub candidates: Vec<(DomainId, f64)>,
}

impl PlacementEvaluation {
    pub fn total_for(&self, z: DomainId) -> Option<f64> {
        self.candidates.iter().find(|(d, _)| *d == z).map(|(_, t)| *t)
    }
}

/// When and how often the leader re-evaluates its position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementPolicy {
    pub period: SimTime,
    /// The period must be at least this many times the largest cross-domain
    /// RTT from the leader domain.
    pub min_ratio: f64,
}

impl PlacementPolicy {
    pub const DEFAULT_RATIO: f64 = 100.0;

    /// A period of `min_ratio` times the largest cross-domain RTT anywhere in
    /// the matrix, so it stays valid wherever the leader moves.
    pub fn for_matrix(lm: &LatencyMatrix, min_ratio: f64) -> Self {
        let max_rtt = (0..lm.domain_count())
            .map(|z| lm.max_rtt_from(DomainId::from_slot(z)))
            .fold(0.0, f64::max);
        Self { period: SimTime::from_millis_f64(max_rtt * min_ratio), min_ratio }
    }

    pub fn validate(&self, lm: &LatencyMatrix, z: DomainId) -> Result<(), PlacementError> {
        let max_rtt_ms = lm.max_rtt_from(z);
        let period_ms = self.period.as_millis_f64();
        if period_ms + 1e-9 < self.min_ratio * max_rtt_ms {
            return Err(PlacementError::PeriodTooShort { period_ms, min_ratio: self.min_ratio, max_rtt_ms });
        }
        Ok(())
    }

    /// Validates against every possible leader domain.
    pub fn validate_all(&self, lm: &LatencyMatrix) -> Result<(), PlacementError> {
        (0..lm.domain_count()).try_for_each(|z| self.validate(lm, DomainId::from_slot(z)))
    }
}

/// Leadership migration request produced by the placement policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GlobalTransfer {
    pub target_domain: DomainId,
}

fn nearest_available(z: DomainId, lm: &LatencyMatrix, avail: &[bool]) -> Result<f64, PlacementError> {
    (0..lm.domain_count())
        .map(DomainId::from_slot)
        .filter(|&j| j != z && avail[j.slot()])
        .map(|j| lm.one_way(z, j))
        .min_by(f64::total_cmp)
        .ok_or_else(|| PlacementError::Infeasible(format!("no available domain other than {z}")))
}

fn check_inputs(lm: &LatencyMatrix, load: &DomainLoadProfile, avail: &[bool]) -> Result<(), PlacementError> {
    let n = lm.domain_count();
    if load.writes.len() != n || load.reads.len() != n || avail.len() != n {
        return Err(PlacementError::Infeasible(format!(
            "dimension mismatch: {n} domains, {} write counts, {} read counts, {} availability flags",
            load.writes.len(),
            load.reads.len(),
            avail.len()
        )));
    }
    Ok(())
}

/// Cross-domain latency `L_i` of the clients in domain `i` when the global
/// leader sits in domain `z`.
///
/// * `i == z`: writes wait one round trip to the nearest other available
///   domain, reads are local: `2 * min_j(l_zj) * W_i`.
/// * `i != z`, `i` available: reads and writes take one round trip to `z`:
///   `2 * l_iz * (W_i + R_i)`.
/// * `i` unavailable: writes take the trip to `z` plus the leader's trip to
///   the nearest available domain, reads the trip to `z`:
///   `2 * (l_iz + min_j(l_zj)) * W_i + 2 * l_iz * R_i`.
pub fn domain_latency(
    z: DomainId,
    i: DomainId,
    lm: &LatencyMatrix,
    load: &DomainLoadProfile,
    avail: &[bool],
) -> Result<f64, PlacementError> {
    check_inputs(lm, load, avail)?;
    if !avail[z.slot()] {
        return Err(PlacementError::Infeasible(format!("leader domain {z} is unavailable")));
    }
    let w = load.writes[i.slot()] as f64;
    let r = load.reads[i.slot()] as f64;
    let nearest = nearest_available(z, lm, avail)?;
    let l_iz = lm.one_way(i, z);
    Ok(if !avail[i.slot()] {
        2.0 * (l_iz + nearest) * w + 2.0 * l_iz * r
    } else if i == z {
        2.0 * nearest * w
    } else {
        2.0 * l_iz * (w + r)
    })
}

/// `L_s = sum_i L_i` for leader domain `z`.
pub fn total_latency(
    z: DomainId,
    lm: &LatencyMatrix,
    load: &DomainLoadProfile,
    avail: &[bool],
) -> Result<PlacementEvaluation, PlacementError> {
    let per_domain_latency = (0..lm.domain_count())
        .map(|i| domain_latency(z, DomainId::from_slot(i), lm, load, avail))
        .collect::<Result<Vec<_>, _>>()?;
    let total = per_domain_latency.iter().sum();
    Ok(PlacementEvaluation { chosen: z, per_domain_latency, total, candidates: vec![(z, total)] })
}

/// The available domain minimizing `L_s`; ties go to the smallest index.
pub fn optimal_domain(
    lm: &LatencyMatrix,
    load: &DomainLoadProfile,
    avail: &[bool],
) -> Result<PlacementEvaluation, PlacementError> {
    check_inputs(lm, load, avail)?;
    let available = avail.iter().filter(|&&a| a).count();
    if available < 2 {
        return Err(PlacementError::Infeasible(format!("{available} available domain(s), need at least 2")));
    }
    let mut best: Option<PlacementEvaluation> = None;
    let mut candidates = Vec::with_capacity(available);
    for z in (0..lm.domain_count()).map(DomainId::from_slot).filter(|z| avail[z.slot()]) {
        let eval = total_latency(z, lm, load, avail)?;
        candidates.push((z, eval.total));
        // Strict comparison keeps the earliest (smallest) domain on ties.
        if best.as_ref().is_none_or(|b| eval.total < b.total) {
            best = Some(eval);
        }
    }
    let mut best = best.expect("at least two candidates scored");
    best.candidates = candidates;
    Ok(best)
}

/// Migration decision at a placement period boundary. Moves only when the
/// chosen domain is strictly better than the current one.
pub fn maybe_migrate(current: DomainId, eval: &PlacementEvaluation) -> Option<GlobalTransfer> {
    if eval.chosen == current {
        return None;
    }
    match eval.total_for(current) {
        Some(cur) if eval.total >= cur => None,
        _ => Some(GlobalTransfer { target_domain: eval.chosen }),
    }
}
