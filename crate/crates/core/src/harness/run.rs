//! Executes a scenario in the simulator and turns the outcome into a report.

use std::sync::Arc;

use crate::cdraft::{self, CdConfig, CdNode, PlacementSetup};
use crate::checker::{check_records, DurabilityRule, SafetyMonitor};
use crate::error::ConfigError;
use crate::protocol::{ClientResult, NodeView, ProtocolNode};
use crate::raft::{self, RaftConfig, RaftNode};
use crate::simnet::{NetworkModel, Simulation, TraceRecord};
use crate::types::{ClientId, ClusterTopology, DomainId, NodeId, SimTime};
use crate::workload::{ClientTiming, ClosedLoopClient, OpGenerator, OpRecord};

use super::metrics::MetricsReport;
use super::scenario::{Protocol, Scenario};

/// Everything a run produced.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: MetricsReport,
    /// Every client operation, completed or not, in client order.
    pub records: Vec<OpRecord>,
    /// Event trace, when requested.
    pub trace: Option<Vec<TraceRecord>>,
}

/// Runs `scenario` and returns its report.
pub fn run(scenario: &Scenario) -> Result<MetricsReport, ConfigError> {
    Ok(run_detailed(scenario, false)?.report)
}

/// Runs `scenario`, optionally recording the event trace.
pub fn run_detailed(scenario: &Scenario, trace: bool) -> Result<RunOutcome, ConfigError> {
    match scenario.run.protocol {
        Protocol::Cdraft => drive(scenario, cdraft_simulation(scenario)?, DurabilityRule::TwoDomain, trace),
        Protocol::Raft => drive(scenario, raft_simulation(scenario)?, DurabilityRule::GlobalMajority, trace),
    }
}

/// A CD-Raft simulation of `scenario`, ready to step, whatever its
/// `protocol` field says.
pub fn cdraft_simulation(scenario: &Scenario) -> Result<Simulation<CdNode, ClosedLoopClient>, ConfigError> {
    scenario.validate()?;
    let topo = scenario.topology()?;
    let leader = scenario.leader_domain()?;
    let t = &scenario.timing;
    let mut cfg = CdConfig::new(topo.clone());
    cfg.seed = scenario.run.seed;
    if let Some(ms) = t.domain_heartbeat_ms {
        cfg.domain_heartbeat = SimTime::from_millis_f64(ms);
    }
    if let Some(ms) = t.global_heartbeat_ms {
        cfg.global_heartbeat = SimTime::from_millis_f64(ms);
    }
    if let Some(range) = t.election_ticks {
        cfg.election_ticks = range;
    }
    if scenario.placement.migrate {
        cfg.placement = Some(PlacementSetup { latency: scenario.latency_matrix()?, policy: scenario.placement_policy()? });
    }
    let nodes = cdraft::bootstrap(Arc::new(cfg), leader, SimTime::ZERO);
    simulation(scenario, &topo, leader, nodes)
}

/// A baseline Raft simulation of `scenario`.
pub fn raft_simulation(scenario: &Scenario) -> Result<Simulation<RaftNode, ClosedLoopClient>, ConfigError> {
    scenario.validate()?;
    let topo = scenario.topology()?;
    let leader = scenario.leader_domain()?;
    let t = &scenario.timing;
    let mut cfg = RaftConfig::new(topo.clone());
    cfg.seed = scenario.run.seed;
    if let Some(ms) = t.global_heartbeat_ms {
        cfg.heartbeat = SimTime::from_millis_f64(ms);
    }
    if let Some(range) = t.election_ticks {
        cfg.election_ticks = range;
    }
    let nodes = raft::bootstrap(Arc::new(cfg), leader, SimTime::ZERO);
    simulation(scenario, &topo, leader, nodes)
}

fn simulation<N: ProtocolNode>(
    scenario: &Scenario,
    topo: &ClusterTopology,
    leader: DomainId,
    nodes: Vec<N>,
) -> Result<Simulation<N, ClosedLoopClient>, ConfigError> {
    let mut net = NetworkModel::new(scenario.latency_matrix()?);
    net.jitter_sigma = scenario.latency.jitter_sigma;
    Simulation::new(nodes, clients(scenario, topo, leader), net, &scenario.faults, scenario.run.seed)
}

fn clients(scenario: &Scenario, topo: &ClusterTopology, leader: DomainId) -> Vec<ClosedLoopClient> {
    let w = &scenario.workload;
    let n = topo.domain_count();
    let servers = topo.all_nodes();
    let target = NodeId { domain: leader, ordinal: 0 };
    let total = (n * usize::from(w.clients_per_domain)) as u64;
    let mut timing = ClientTiming::default();
    if let Some(ms) = scenario.timing.client_retry_ms {
        timing.retry_timeout = SimTime::from_millis_f64(ms);
    }
    let mut out = Vec::new();
    for d in topo.domains() {
        for ordinal in 0..w.clients_per_domain {
            let id = ClientId { domain: d, ordinal };
            let slot = out.len() as u64;
            let generator = OpGenerator::new(w, id, slot, total, scenario.run.seed);
            out.push(ClosedLoopClient::new(id, generator, w.ops_for_client_in(d, n), servers.clone(), target, timing));
        }
    }
    out
}

fn drive<N: ProtocolNode>(
    scenario: &Scenario,
    mut sim: Simulation<N, ClosedLoopClient>,
    rule: DurabilityRule,
    trace: bool,
) -> Result<RunOutcome, ConfigError> {
    let topo = scenario.topology()?;
    let leader = scenario.leader_domain()?;
    if trace {
        sim.enable_trace();
    }
    let limit = SimTime::from_millis_f64(scenario.run.duration_ms);
    let mut violations = Vec::new();
    let finished = if scenario.run.check_invariants {
        sim.enable_response_log();
        let mut monitor = SafetyMonitor::new(topo.clone(), rule).with_state_machine_check();
        loop {
            if sim.clients_finished() {
                break true;
            }
            if sim.next_event_time().is_none_or(|t| t > limit) || !sim.step() {
                break false;
            }
            let responses = sim.take_responses();
            let views: Vec<NodeView<'_>> = sim.nodes().iter().map(ProtocolNode::view).collect();
            let mut found = monitor.observe(&views);
            for (slot, resp) in responses {
                if resp.result == ClientResult::WriteOk {
                    found.extend(monitor.check_write_response(&views, resp.tag, slot));
                }
            }
            drop(views);
            violations.extend(found.into_iter().map(|v| format!("{} {v}", sim.now())));
            if !violations.is_empty() {
                break false;
            }
        }
    } else {
        sim.run_until_done(limit)
    };
    let end = sim.now();
    let trace = trace.then(|| sim.trace().to_vec());
    let (nodes, clients, stats) = sim.into_parts();
    let records: Vec<OpRecord> = clients.iter().flat_map(ClosedLoopClient::history).collect();

    let mut report = MetricsReport {
        scenario: scenario.name.clone(),
        protocol: scenario.run.protocol.name().to_string(),
        seed: scenario.run.seed,
        leader_domain: leader.0,
        finished,
        migrations: nodes.iter().map(ProtocolNode::migrations).sum(),
        network: stats,
        violations,
        ..MetricsReport::default()
    };
    report.record_ops(&records, end.as_millis_f64());
    if scenario.run.check_linearizability {
        let verdict = check_records(&records);
        if let Err(w) = &verdict {
            report.violations.push(format!("not linearizable: {w}"));
        }
        report.linearizable = Some(verdict.is_ok());
    }
    Ok(RunOutcome { report, records, trace })
}
