use super::*;
use crate::protocol::{ClientOp, ClientRequest, ClientResponse, ClientResult};
use crate::types::Command;

fn n(d: u16, o: u16) -> NodeId {
    NodeId::new(d, o)
}

fn cluster(domains: usize) -> Vec<CdNode> {
    let cfg = CdConfig::new(ClusterTopology::uniform(domains, 3).unwrap());
    bootstrap(Arc::new(cfg), DomainId(1), SimTime::ZERO)
}

fn node(nodes: &mut [CdNode], id: NodeId) -> &mut CdNode {
    nodes.iter_mut().find(|x| x.id == id).unwrap()
}

fn put(client_domain: u16, req_id: u64, value: &str) -> Payload<CdMessage> {
    Payload::Request(ClientRequest {
        tag: RequestTag { client: ClientId { domain: DomainId(client_domain), ordinal: 0 }, req_id },
        op: ClientOp::Put { key: Bytes::from_static(b"x"), value: Bytes::copy_from_slice(value.as_bytes()) },
    })
}

fn get(client_domain: u16, req_id: u64, key: &'static str) -> Payload<CdMessage> {
    Payload::Request(ClientRequest {
        tag: RequestTag { client: ClientId { domain: DomainId(client_domain), ordinal: 0 }, req_id },
        op: ClientOp::Get { key: Bytes::from_static(key.as_bytes()) },
    })
}

fn client(d: u16) -> Addr {
    Addr::Client(ClientId { domain: DomainId(d), ordinal: 0 })
}

/// Delivers a request and then every resulting peer message in FIFO order,
/// skipping those `drop` rejects. Returns responses with their sender.
fn deliver_all(
    nodes: &mut [CdNode],
    to: NodeId,
    from: Addr,
    payload: Payload<CdMessage>,
    drop: impl Fn(NodeId, NodeId, &CdMessage) -> bool,
) -> Vec<(NodeId, ClientResponse)> {
    let now = SimTime::from_millis(1);
    let mut queue = VecDeque::from([(from, to, payload)]);
    let mut responses = Vec::new();
    while let Some((src, dst, p)) = queue.pop_front() {
        let mut out = Outbox::new();
        node(nodes, dst).on_message(now, src, p, &mut out);
        for (addr, item) in out.drain() {
            match (addr, item) {
                (Addr::Node(next), Payload::Peer(m)) => {
                    if !drop(dst, next, &m) {
                        queue.push_back((Addr::Node(dst), next, Payload::Peer(m)));
                    }
                }
                (_, Payload::Response(r)) => responses.push((dst, r)),
                _ => {}
            }
        }
    }
    responses
}

fn keep_all(_: NodeId, _: NodeId, _: &CdMessage) -> bool {
    false
}

#[test]
fn write_fans_out_on_both_tiers_in_one_step() {
    let mut nodes = cluster(3);
    let mut out = Outbox::new();
    node(&mut nodes, n(1, 0)).on_message(SimTime::ZERO, client(2), put(2, 1, "v"), &mut out);
    let mut global = Vec::new();
    let mut domain = Vec::new();
    for (addr, p) in out.items() {
        match (addr, p) {
            (Addr::Node(to), Payload::Peer(CdMessage::GlobalAppend { entries, .. })) => {
                assert_eq!(entries.len(), 1);
                global.push(*to);
            }
            (Addr::Node(to), Payload::Peer(CdMessage::DomainAppend { entries, .. })) => {
                assert_eq!(entries.len(), 1);
                domain.push(*to);
            }
            (_, Payload::Response(_)) => panic!("answered before commit"),
            _ => {}
        }
    }
    global.sort();
    domain.sort();
    assert_eq!(global, vec![n(2, 0), n(3, 0)]);
    assert_eq!(domain, vec![n(1, 1), n(1, 2)]);
}

fn seeded_leader(domains: usize, entries: u64) -> CdNode {
    let mut gl = cluster(domains).remove(0);
    assert_eq!(gl.role, Role::GlobalLeader);
    for _ in 0..entries {
        gl.log.push(1, Command::NoOp, DomainId(1), None);
    }
    gl
}

#[test]
fn commit_is_min_of_own_majority_and_best_remote_majority() {
    let mut gl = seeded_leader(3, 10);
    gl.in_domain_commit = 7;
    gl.domains.get_mut(&DomainId(2)).unwrap().majority_ack = 6;
    gl.domains.get_mut(&DomainId(3)).unwrap().majority_ack = 3;
    gl.advance_global_commit(&mut Outbox::new());
    assert_eq!(gl.commit_index, 6);

    // The own domain is the binding side.
    gl.domains.get_mut(&DomainId(3)).unwrap().majority_ack = 9;
    gl.advance_global_commit(&mut Outbox::new());
    assert_eq!(gl.commit_index, 7);
}

#[test]
fn no_remote_ack_means_no_commit() {
    let mut gl = seeded_leader(3, 10);
    gl.in_domain_commit = 7;
    gl.advance_global_commit(&mut Outbox::new());
    assert_eq!(gl.commit_index, 0);
}

#[test]
fn two_domain_cluster_commits_on_both_majorities() {
    let mut gl = seeded_leader(2, 12);
    gl.in_domain_commit = 9;
    gl.domains.get_mut(&DomainId(2)).unwrap().majority_ack = 12;
    gl.advance_global_commit(&mut Outbox::new());
    assert_eq!(gl.commit_index, 9);
}

#[test]
fn commit_never_counts_entries_from_older_terms_alone() {
    let mut gl = cluster(3).remove(0);
    gl.log.push(1, Command::NoOp, DomainId(1), None);
    gl.global_term = 2;
    gl.in_domain_commit = 1;
    gl.domains.get_mut(&DomainId(2)).unwrap().majority_ack = 1;
    gl.advance_global_commit(&mut Outbox::new());
    assert_eq!(gl.commit_index, 0);
}

#[test]
fn remote_write_is_answered_by_its_own_domain_leader() {
    let mut nodes = cluster(3);
    let responses = deliver_all(&mut nodes, n(1, 0), client(2), put(2, 1, "v"), keep_all);
    let (first_from, first) = &responses[0];
    assert_eq!(*first_from, n(2, 0));
    assert_eq!(first.result, ClientResult::WriteOk);
    assert!(responses.iter().all(|(_, r)| r.result == ClientResult::WriteOk));
    assert_eq!(node(&mut nodes, n(1, 0)).commit_index, 1);
}

#[test]
fn fast_return_waits_for_the_leader_domain_hint() {
    let mut nodes = cluster(3);
    // Without the global leader's commit hint or commit index reaching the
    // remote domain leader, it must stay silent.
    let responses = deliver_all(&mut nodes, n(1, 0), client(2), put(2, 1, "v"), |from, to, m| {
        from == n(1, 0) && to.domain == DomainId(2) && !matches!(m, CdMessage::GlobalAppend { leader_commit: 0, .. })
    });
    assert!(responses.iter().all(|(from, _)| *from != n(2, 0)), "{responses:?}");
}

#[test]
fn co_located_write_waits_for_a_remote_majority() {
    let mut nodes = cluster(3);
    let local_only = |from: NodeId, to: NodeId, _: &CdMessage| from.domain != to.domain;
    let responses = deliver_all(&mut nodes, n(1, 0), client(1), put(1, 1, "v"), local_only);
    assert!(responses.is_empty());
    let gl = node(&mut nodes, n(1, 0));
    assert_eq!(gl.in_domain_commit, 1);
    assert_eq!(gl.commit_index, 0);

    let mut nodes = cluster(3);
    let responses = deliver_all(&mut nodes, n(1, 0), client(1), put(1, 1, "v"), keep_all);
    assert_eq!(responses.len(), 1);
    assert_eq!(responses[0].0, n(1, 0));
    assert_eq!(responses[0].1.result, ClientResult::WriteOk);
}

#[test]
fn read_of_missing_key_is_an_explicit_not_found() {
    let mut nodes = cluster(3);
    let responses = deliver_all(&mut nodes, n(1, 0), client(3), get(3, 1, "nope"), keep_all);
    assert_eq!(responses.len(), 1);
    assert_eq!(responses[0].1.result, ClientResult::Value(None));
}

#[test]
fn read_waits_until_in_domain_commit_is_applied() {
    let mut nodes = cluster(3);
    let local_only = |from: NodeId, to: NodeId, _: &CdMessage| from.domain != to.domain;
    deliver_all(&mut nodes, n(1, 0), client(1), put(1, 1, "v"), local_only);
    let gl = node(&mut nodes, n(1, 0));
    let mut out = Outbox::new();
    gl.on_message(SimTime::from_millis(2), client(1), get(1, 2, "x"), &mut out);
    assert!(out.is_empty());
    assert_eq!(gl.reads.len(), 1);

    let mut nodes = cluster(3);
    deliver_all(&mut nodes, n(1, 0), client(1), put(1, 1, "v"), keep_all);
    let responses = deliver_all(&mut nodes, n(1, 0), client(1), get(1, 2, "x"), keep_all);
    assert_eq!(responses[0].1.result, ClientResult::Value(Some(Bytes::from_static(b"v"))));
}

#[test]
fn non_leaders_redirect_to_the_global_leader() {
    let mut nodes = cluster(3);
    for id in [n(2, 0), n(1, 1), n(3, 2)] {
        let mut out = Outbox::new();
        node(&mut nodes, id).on_message(SimTime::ZERO, client(2), put(2, 1, "v"), &mut out);
        let items: Vec<_> = out.drain().collect();
        assert_eq!(items.len(), 1);
        let (_, Payload::Response(r)) = &items[0] else { panic!("expected a response") };
        assert_eq!(r.result, ClientResult::Redirect(Some(n(1, 0))));
    }
}

fn global_append(term: Term, prev_index: LogIndex, prev_term: Term) -> Payload<CdMessage> {
    Payload::Peer(CdMessage::GlobalAppend {
        global_term: term,
        prev_index,
        prev_term,
        entries: Vec::new(),
        leader_commit: 0,
        commit_hint: 0,
    })
}

fn only_global_ack(out: &mut Outbox<CdMessage>) -> (bool, Term) {
    let items: Vec<_> = out.drain().collect();
    assert_eq!(items.len(), 1, "{items:?}");
    match &items[0] {
        (Addr::Node(to), Payload::Peer(CdMessage::GlobalAck { success, global_term, .. })) => {
            assert_eq!(*to, n(1, 0));
            (*success, *global_term)
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn global_append_with_a_gap_is_rejected() {
    let mut nodes = cluster(3);
    let dl = node(&mut nodes, n(2, 0));
    let mut out = Outbox::new();
    dl.on_message(SimTime::ZERO, Addr::Node(n(1, 0)), global_append(1, 5, 1), &mut out);
    assert_eq!(only_global_ack(&mut out), (false, 1));
    assert_eq!(dl.log.last_index(), 0);
}

#[test]
fn stale_global_term_is_rejected_without_state_change() {
    let mut nodes = cluster(3);
    let dl = node(&mut nodes, n(2, 0));
    dl.global_term = 3;
    let mut out = Outbox::new();
    dl.on_message(SimTime::ZERO, Addr::Node(n(1, 0)), global_append(2, 0, 0), &mut out);
    assert_eq!(only_global_ack(&mut out), (false, 3));
    assert_eq!(dl.global_term, 3);
    assert_eq!(dl.role, Role::DomainLeader);
}

#[test]
fn stale_domain_term_is_nacked() {
    let mut nodes = cluster(3);
    let f = node(&mut nodes, n(2, 1));
    f.domain_term = 4;
    let mut out = Outbox::new();
    let msg = CdMessage::DomainAppend {
        domain_term: 3,
        global_term: 1,
        global_leader: Some(n(1, 0)),
        prev_index: 0,
        prev_term: 0,
        entries: Vec::new(),
        commit: 0,
    };
    f.on_message(SimTime::ZERO, Addr::Node(n(2, 0)), Payload::Peer(msg), &mut out);
    let items: Vec<_> = out.drain().collect();
    assert!(matches!(
        items.as_slice(),
        [(_, Payload::Peer(CdMessage::DomainAck { domain_term: 4, success: false, .. }))]
    ));
}

#[test]
fn global_quorum_is_all_but_one_and_at_least_a_majority() {
    let q = |d| CdConfig::new(ClusterTopology::uniform(d, 3).unwrap()).global_quorum();
    assert_eq!(q(2), 2);
    assert_eq!(q(3), 2);
    assert_eq!(q(5), 4);
}

#[test]
fn restart_keeps_persistent_state_only() {
    let mut nodes = cluster(3);
    deliver_all(&mut nodes, n(1, 0), client(2), put(2, 1, "v"), keep_all);
    let dl = node(&mut nodes, n(2, 0));
    let (log, dt, gt, commit) = (dl.log.clone(), dl.domain_term, dl.global_term, dl.commit_index);
    assert!(commit >= 1 || dl.commit_hint >= 1);
    dl.restart(SimTime::from_millis(10));
    assert_eq!(dl.log, log);
    assert_eq!((dl.domain_term, dl.global_term, dl.commit_index), (dt, gt, commit));
    assert_eq!(dl.role, Role::Follower);
    assert_eq!(dl.in_domain_commit, 0);
    assert!(dl.fast_returns.is_empty());
    assert_eq!(dl.apply_index, commit);
}

proptest::proptest! {
    #[test]
    fn commit_matches_two_domain_oracle(
        last in 1u64..30,
        idc in 0u64..30,
        acks in proptest::collection::vec(0u64..30, 1..5),
    ) {
        let mut gl = seeded_leader(acks.len() + 1, last);
        gl.in_domain_commit = idc;
        for (i, &a) in acks.iter().enumerate() {
            gl.domains.get_mut(&DomainId::from_slot(i + 1)).unwrap().majority_ack = a;
        }
        gl.advance_global_commit(&mut Outbox::new());
        // Largest index held by the own domain and by some other domain.
        let oracle = (0..=last).rev().find(|&k| k <= idc && acks.iter().any(|&a| a >= k)).unwrap();
        proptest::prop_assert_eq!(gl.commit_index, oracle);
        proptest::prop_assert_eq!(gl.apply_index, oracle);
    }
}
