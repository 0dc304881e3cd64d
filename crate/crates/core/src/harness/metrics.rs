//! Latency statistics, run reports and scenario comparisons.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::protocol::ClientResult;
use crate::simnet::NetStats;
use crate::workload::OpRecord;

/// Summary of a latency sample set, in simulated milliseconds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: u64,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub p999_ms: f64,
    pub max_ms: f64,
}

/// Nearest-rank percentile of sorted samples: the smallest sample with at
/// least `q` of the samples at or below it.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl LatencyStats {
    pub fn from_samples(mut samples: Vec<f64>) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        samples.sort_by(f64::total_cmp);
        let n = samples.len();
        Self {
            count: n as u64,
            mean_ms: samples.iter().sum::<f64>() / n as f64,
            p50_ms: percentile(&samples, 0.50),
            p99_ms: percentile(&samples, 0.99),
            p999_ms: percentile(&samples, 0.999),
            max_ms: samples[n - 1],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainBreakdown {
    pub write: LatencyStats,
    pub read: LatencyStats,
    pub overall: LatencyStats,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub protocol: String,
    pub seed: u64,
    /// Domain of the global leader (CD-Raft) or leader (Raft) at start.
    pub leader_domain: u16,
    pub write: LatencyStats,
    pub read: LatencyStats,
    pub overall: LatencyStats,
    /// Completed operations per simulated second.
    pub throughput_ops_per_s: f64,
    /// Simulated time at which the run ended.
    pub simulated_ms: f64,
    /// False if the time limit stopped the run with requests outstanding.
    pub finished: bool,
    pub unanswered: u64,
    /// Completed operations by the number of cross-domain legs on their
    /// response path.
    pub legs_histogram: BTreeMap<u32, u64>,
    pub migrations: u64,
    /// Keyed by domain number.
    pub per_domain: BTreeMap<u16, DomainBreakdown>,
    pub network: NetStats,
    /// Safety violations seen by the monitor, if enabled.
    pub violations: Vec<String>,
    /// Verdict of the linearizability check, if enabled.
    pub linearizable: Option<bool>,
}

fn is_answer(r: &OpRecord) -> bool {
    r.complete.is_some() && !matches!(r.result, Some(ClientResult::Redirect(_)) | None)
}

impl MetricsReport {
    /// Fills the latency, leg and throughput fields from client records.
    pub fn record_ops(&mut self, records: &[OpRecord], simulated_ms: f64) {
        let mut w = Vec::new();
        let mut r = Vec::new();
        let mut by_domain: BTreeMap<u16, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        self.legs_histogram.clear();
        self.unanswered = 0;
        for rec in records {
            if !is_answer(rec) {
                self.unanswered += 1;
                continue;
            }
            let ms = rec.latency().expect("answered").as_millis_f64();
            let slot = by_domain.entry(rec.tag.client.domain.0).or_default();
            if rec.op.is_write() {
                w.push(ms);
                slot.0.push(ms);
            } else {
                r.push(ms);
                slot.1.push(ms);
            }
            *self.legs_histogram.entry(rec.legs).or_default() += 1;
        }
        let all: Vec<f64> = w.iter().chain(&r).copied().collect();
        let done = all.len();
        self.write = LatencyStats::from_samples(w);
        self.read = LatencyStats::from_samples(r);
        self.overall = LatencyStats::from_samples(all);
        self.per_domain = by_domain
            .into_iter()
            .map(|(d, (w, r))| {
                let all = w.iter().chain(&r).copied().collect();
                (d, DomainBreakdown { write: LatencyStats::from_samples(w), read: LatencyStats::from_samples(r), overall: LatencyStats::from_samples(all) })
            })
            .collect();
        self.simulated_ms = simulated_ms;
        self.throughput_ops_per_s = if simulated_ms > 0.0 { done as f64 / (simulated_ms / 1000.0) } else { 0.0 };
    }

    /// Deterministic machine-readable form.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let name = if self.scenario.is_empty() { "-" } else { &self.scenario };
        let _ = writeln!(s, "scenario {name}  protocol {}  seed {}  leader domain {}", self.protocol, self.seed, self.leader_domain);
        let _ = writeln!(s, "{:<8} {:>8} {:>10} {:>10} {:>10} {:>10} {:>10}", "class", "count", "mean", "p50", "p99", "p999", "max");
        for (label, st) in [("write", &self.write), ("read", &self.read), ("overall", &self.overall)] {
            let _ = writeln!(
                s,
                "{:<8} {:>8} {:>10.3} {:>10.3} {:>10.3} {:>10.3} {:>10.3}",
                label, st.count, st.mean_ms, st.p50_ms, st.p99_ms, st.p999_ms, st.max_ms
            );
        }
        for (d, b) in &self.per_domain {
            let _ = writeln!(s, "domain {d}: {} ops, mean {:.3} ms", b.overall.count, b.overall.mean_ms);
        }
        let legs: Vec<String> = self.legs_histogram.iter().map(|(k, v)| format!("{k}:{v}")).collect();
        let _ = writeln!(s, "legs {}", legs.join(" "));
        let _ = writeln!(
            s,
            "throughput {:.1} ops/s over {:.1} ms  finished {}  unanswered {}  migrations {}",
            self.throughput_ops_per_s, self.simulated_ms, self.finished, self.unanswered, self.migrations
        );
        let n = &self.network;
        let _ = writeln!(
            s,
            "messages sent {} delivered {} dropped {} crashes {}",
            n.sent,
            n.delivered,
            n.dropped_scripted + n.dropped_random + n.dropped_partition,
            n.crashes
        );
        if let Some(l) = self.linearizable {
            let _ = writeln!(s, "linearizable {l}");
        }
        for v in &self.violations {
            let _ = writeln!(s, "VIOLATION {v}");
        }
        s
    }
}

/// One metric of two runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub metric: String,
    pub a: f64,
    pub b: f64,
    /// `(a - b) / a * 100`; zero when both are zero, absent when only `a` is.
    pub reduction_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub a: String,
    pub b: String,
    pub metrics: Vec<MetricDelta>,
}

fn reduction(a: f64, b: f64) -> Option<f64> {
    if a == b {
        Some(0.0)
    } else if a == 0.0 {
        None
    } else {
        Some((a - b) / a * 100.0)
    }
}

fn label(r: &MetricsReport, fallback: &str) -> String {
    let name = if r.scenario.is_empty() { fallback } else { &r.scenario };
    format!("{name} ({})", r.protocol)
}

/// Per-metric percentage reduction from `a` to `b`.
pub fn compare(a: &MetricsReport, b: &MetricsReport) -> CompareReport {
    let mut metrics = Vec::new();
    for (class, sa, sb) in [("write", &a.write, &b.write), ("read", &a.read, &b.read), ("overall", &a.overall, &b.overall)] {
        for (stat, x, y) in [
            ("mean", sa.mean_ms, sb.mean_ms),
            ("p50", sa.p50_ms, sb.p50_ms),
            ("p99", sa.p99_ms, sb.p99_ms),
            ("p999", sa.p999_ms, sb.p999_ms),
        ] {
            metrics.push(MetricDelta { metric: format!("{class}.{stat}_ms"), a: x, b: y, reduction_pct: reduction(x, y) });
        }
    }
    let (x, y) = (a.throughput_ops_per_s, b.throughput_ops_per_s);
    metrics.push(MetricDelta { metric: "throughput_ops_per_s".into(), a: x, b: y, reduction_pct: reduction(x, y) });
    CompareReport { a: label(a, "a"), b: label(b, "b"), metrics }
}

impl CompareReport {
    pub fn get(&self, metric: &str) -> Option<&MetricDelta> {
        self.metrics.iter().find(|m| m.metric == metric)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "A = {}\nB = {}", self.a, self.b);
        let _ = writeln!(s, "{:<24} {:>12} {:>12} {:>12}", "metric", "A", "B", "reduction");
        for m in &self.metrics {
            let red = m.reduction_pct.map_or("-".to_string(), |p| format!("{p:.2}%"));
            let _ = writeln!(s, "{:<24} {:>12.3} {:>12.3} {:>12}", m.metric, m.a, m.b, red);
        }
        s
    }
}
