use cdraft::harness::metrics::percentile;
use cdraft::harness::{compare, LatencyStats, MetricsReport, Protocol, Scenario};
use cdraft::placement::{optimal_domain, DomainLoadProfile};
use cdraft::types::{log_up_to_date, DomainId, Freshness, LatencyMatrix};
use cdraft::workload::{WorkloadKind, WorkloadSpec};
use proptest::prelude::*;

/// Symmetric one-way delays for `n` domains, drawn from whole milliseconds.
fn matrix(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(1u32..200, n * (n - 1) / 2).prop_map(move |upper| {
        let mut m = vec![vec![1.0; n]; n];
        let mut it = upper.into_iter();
        for i in 0..n {
            for j in i + 1..n {
                let v = f64::from(it.next().unwrap());
                m[i][j] = v;
                m[j][i] = v;
            }
        }
        m
    })
}

fn instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<u64>, Vec<u64>)> {
    (2usize..7).prop_flat_map(|n| {
        (matrix(n), prop::collection::vec(0u64..1000, n), prop::collection::vec(0u64..1000, n))
    })
}

fn best(m: &[Vec<f64>], writes: &[u64], reads: &[u64]) -> (DomainId, Vec<(DomainId, f64)>) {
    let lm = LatencyMatrix::new(m.to_vec(), 0.25).unwrap();
    let load = DomainLoadProfile { writes: writes.to_vec(), reads: reads.to_vec(), window_ms: 0.0 };
    let eval = optimal_domain(&lm, &load, &vec![true; m.len()]).unwrap();
    (eval.chosen, eval.candidates)
}

fn unique_minimum(candidates: &[(DomainId, f64)]) -> bool {
    let min = candidates.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    candidates.iter().filter(|c| c.1 == min).count() == 1
}

proptest! {
    #[test]
    fn chosen_domain_minimizes_total((m, w, r) in instance()) {
        let (chosen, candidates) = best(&m, &w, &r);
        let chosen_total = candidates.iter().find(|c| c.0 == chosen).unwrap().1;
        for (d, t) in &candidates {
            prop_assert!(chosen_total <= *t);
            if *t == chosen_total {
                prop_assert!(chosen <= *d);
            }
        }
    }

    #[test]
    fn choice_is_invariant_under_scaling((m, w, r) in instance(), shift in 0i32..4, k in 1u64..50) {
        let (chosen, _) = best(&m, &w, &r);
        // Powers of two keep every product exact, so ties survive scaling.
        let c = 2f64.powi(shift - 1);
        let scaled: Vec<Vec<f64>> = m.iter().map(|row| row.iter().map(|v| v * c).collect()).collect();
        prop_assert_eq!(best(&scaled, &w, &r).0, chosen);
        let w2: Vec<u64> = w.iter().map(|x| x * k).collect();
        let r2: Vec<u64> = r.iter().map(|x| x * k).collect();
        prop_assert_eq!(best(&m, &w2, &r2).0, chosen);
    }

    #[test]
    fn choice_follows_a_relabelling((m, w, r) in instance(), seed in any::<u64>()) {
        let n = m.len();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let (chosen, candidates) = best(&m, &w, &r);
        prop_assume!(unique_minimum(&candidates));
        // Domain slot i becomes slot perm[i].
        let mut pm = vec![vec![0.0; n]; n];
        let mut pw = vec![0; n];
        let mut pr = vec![0; n];
        for i in 0..n {
            pw[perm[i]] = w[i];
            pr[perm[i]] = r[i];
            for j in 0..n {
                pm[perm[i]][perm[j]] = m[i][j];
            }
        }
        prop_assert_eq!(best(&pm, &pw, &pr).0, DomainId::from_slot(perm[chosen.slot()]));
    }

    #[test]
    fn percentile_is_monotone(mut xs in prop::collection::vec(0.0f64..1e4, 1..200), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        xs.sort_by(f64::total_cmp);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(percentile(&xs, lo) <= percentile(&xs, hi));
        prop_assert!(xs.contains(&percentile(&xs, lo)));
        let s = LatencyStats::from_samples(xs.clone());
        prop_assert!(s.p50_ms <= s.p99_ms && s.p99_ms <= s.p999_ms && s.p999_ms <= s.max_ms);
        prop_assert_eq!(s.max_ms, *xs.last().unwrap());
        prop_assert_eq!(s.count, xs.len() as u64);
    }

    #[test]
    fn self_comparison_reduces_nothing(xs in prop::collection::vec(0.1f64..500.0, 1..50), tput in 0.0f64..1e4) {
        let r = MetricsReport {
            write: LatencyStats::from_samples(xs.clone()),
            read: LatencyStats::from_samples(xs.iter().map(|x| x / 2.0).collect()),
            overall: LatencyStats::from_samples(xs),
            throughput_ops_per_s: tput,
            ..MetricsReport::default()
        };
        for d in compare(&r, &r).metrics {
            prop_assert_eq!(d.reduction_pct, Some(0.0), "{}", d.metric);
        }
    }

    #[test]
    fn freshness_orders_by_term_then_index(a in (0u64..6, 0u64..30), b in (0u64..6, 0u64..30)) {
        let expected = match a.cmp(&b) {
            std::cmp::Ordering::Greater => Freshness::ANewer,
            std::cmp::Ordering::Less => Freshness::BNewer,
            std::cmp::Ordering::Equal => Freshness::Equal,
        };
        prop_assert_eq!(log_up_to_date(a, b), expected);
    }

    #[test]
    fn scenario_survives_a_toml_round_trip(
        raft in any::<bool>(),
        domains in 2usize..6,
        nodes in 1u16..6,
        inter in 1u32..100,
        ops in 1u64..500,
        seed in any::<u32>(),
        kind in prop::sample::select(vec![WorkloadKind::Load, WorkloadKind::A, WorkloadKind::B, WorkloadKind::C]),
    ) {
        let protocol = if raft { Protocol::Raft } else { Protocol::Cdraft };
        let mut s = Scenario::symmetric(protocol, domains, nodes, f64::from(inter), WorkloadSpec::new(kind, ops));
        s.name = "round-trip".into();
        s.run.seed = u64::from(seed);
        let text = toml::to_string(&s).unwrap();
        prop_assert_eq!(Scenario::from_toml(&text, "generated").unwrap(), s);
    }
}
