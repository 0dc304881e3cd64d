//! Client requests, log replication on both tiers, commit and fast return.

use super::*;
use crate::protocol::{ClientOp, ClientRequest, ClientResult};
use crate::types::Command;

impl CdNode {
    pub(crate) fn handle_client_write(&mut self, now: SimTime, req: ClientRequest, out: &mut Outbox<CdMessage>) {
        let tag = req.tag;
        if self.role != Role::GlobalLeader || self.transfer.is_some() {
            out.respond(tag, ClientResult::Redirect(self.redirect_hint()));
            return;
        }
        let ClientOp::Put { key, value } = req.op else {
            unreachable!("reads are routed to handle_client_read")
        };
        if self.cfg.topology.contains_domain(tag.client.domain) {
            self.load.record_write(tag.client.domain);
        }
        if let Some(&(req_id, index)) = self.sessions.get(&tag.client) {
            if req_id == tag.req_id {
                if index <= self.commit_index {
                    out.respond(tag, ClientResult::WriteOk);
                } else {
                    self.replies.insert(index, tag);
                }
                return;
            }
            if req_id > tag.req_id {
                return;
            }
        }
        let index = self.log.push(self.global_term, Command::Put { key, value }, tag.client.domain, Some(tag));
        self.sessions.insert(tag.client, (tag.req_id, index));
        self.replies.insert(index, tag);
        self.replicate(now, out);
    }

    pub(crate) fn handle_client_read(&mut self, _now: SimTime, req: ClientRequest, out: &mut Outbox<CdMessage>) {
        let tag = req.tag;
        if self.role != Role::GlobalLeader || self.transfer.is_some() {
            out.respond(tag, ClientResult::Redirect(self.redirect_hint()));
            return;
        }
        if self.cfg.topology.contains_domain(tag.client.domain) {
            self.load.record_read(tag.client.domain);
        }
        let key = req.op.key().clone();
        let read_index = self.in_domain_commit.max(self.term_start);
        if self.apply_index >= read_index {
            out.respond(tag, ClientResult::Value(self.kv.get(&key).cloned()));
        } else {
            self.reads.push_back(PendingRead { read_index, tag, key });
        }
    }

    /// Sends whatever each peer is missing, on both tiers at once.
    pub(crate) fn replicate(&mut self, now: SimTime, out: &mut Outbox<CdMessage>) {
        for d in self.other_domains() {
            self.send_global_append(d, out);
        }
        self.broadcast_domain_append(out);
        self.update_in_domain_commit(now, out);
    }

    pub(crate) fn send_global_append(&mut self, d: DomainId, out: &mut Outbox<CdMessage>) {
        let last = self.log.last_index();
        let Some(p) = self.domains.get_mut(&d) else { return };
        let prev_index = p.next - 1;
        let msg = CdMessage::GlobalAppend {
            global_term: self.global_term,
            prev_index,
            prev_term: self.log.term_at(prev_index).expect("next index within log"),
            entries: self.log.slice_from(p.next),
            leader_commit: self.commit_index,
            commit_hint: self.in_domain_commit,
        };
        p.next = last + 1;
        match p.leader {
            Some(dl) if !p.suspected => out.send(dl, msg),
            _ => {
                for m in self.cfg.topology.domain_members(d) {
                    out.send(m, msg.clone());
                }
            }
        }
    }

    pub(crate) fn send_domain_append(&mut self, peer: NodeId, out: &mut Outbox<CdMessage>) {
        let last = self.log.last_index();
        let Some(p) = self.followers.get_mut(&peer) else { return };
        let prev_index = p.next - 1;
        let msg = CdMessage::DomainAppend {
            domain_term: self.domain_term,
            global_term: self.global_term,
            global_leader: self.global_leader,
            prev_index,
            prev_term: self.log.term_at(prev_index).expect("next index within log"),
            entries: self.log.slice_from(p.next),
            commit: self.commit_index,
        };
        p.next = last + 1;
        out.send(peer, msg);
    }

    pub(crate) fn broadcast_domain_append(&mut self, out: &mut Outbox<CdMessage>) {
        let peers: Vec<NodeId> = self.followers.keys().copied().collect();
        for p in peers {
            self.send_domain_append(p, out);
        }
    }

    /// Consistency-check failure hint: the longest prefix that might match.
    fn reject_hint(&self, prev_index: LogIndex) -> LogIndex {
        if prev_index > self.log.last_index() {
            self.log.last_index()
        } else {
            prev_index.saturating_sub(1)
        }
    }

    /// Bookkeeping after the local log lost its suffix starting at `from`.
    fn on_truncate(&mut self, from: LogIndex) {
        debug_assert!(from > self.commit_index, "committed entry {from} truncated on {}", self.id);
        let keep = from - 1;
        for p in self.followers.values_mut() {
            p.matched = p.matched.min(keep);
            p.next = p.next.min(from);
        }
        self.in_domain_commit = self.in_domain_commit.min(keep);
        self.global_match = self.global_match.min(keep);
        self.fast_returns.retain(|&i, _| i < from);
    }

    /// Registers own-domain client entries in `(after, last]` for fast
    /// return.
    fn register_fast_returns(&mut self, after: LogIndex) {
        let me = self.domain();
        for e in self.log.slice_from(after + 1) {
            if let (Some(tag), true) = (e.request, e.origin_domain == me) {
                self.fast_returns.insert(e.index, tag);
            }
        }
    }

    pub(crate) fn handle_global_append(&mut self, now: SimTime, from: NodeId, msg: CdMessage, out: &mut Outbox<CdMessage>) {
        let CdMessage::GlobalAppend { global_term, prev_index, prev_term, entries, leader_commit, commit_hint } = msg else {
            return;
        };
        if global_term < self.global_term {
            if self.role.leads_domain() {
                out.send(from, self.global_ack(false, 0));
            }
            return;
        }
        self.observe_global_term(now, global_term);
        if self.role == Role::GlobalLeader {
            return;
        }
        if self.role == Role::GlobalCandidate {
            self.role = Role::DomainLeader;
            self.global_votes.clear();
        }
        self.global_leader = Some(from);
        if !self.role.leads_domain() {
            return;
        }
        self.reset_global_deadline(now);
        if !self.log.matches(prev_index, prev_term) {
            out.send(from, self.global_ack(false, self.reject_hint(prev_index)));
            return;
        }
        let old_last = self.log.last_index();
        let mut fresh_from = old_last;
        if let Some(t) = self.log.merge(&entries) {
            self.on_truncate(t);
            fresh_from = t - 1;
        }
        let last_new = prev_index + entries.len() as LogIndex;
        self.global_match = self.global_match.max(last_new);
        self.register_fast_returns(fresh_from);
        self.commit_hint = self.commit_hint.max(commit_hint);
        if leader_commit > self.commit_index {
            self.commit_index = self.commit_index.max(leader_commit.min(last_new));
            self.apply_committed(out);
        }
        if !entries.is_empty() || self.followers.values().any(|p| p.next <= self.log.last_index()) {
            self.broadcast_domain_append(out);
        }
        self.update_in_domain_commit(now, out);
        out.send(from, self.global_ack(true, self.global_match));
        self.try_fast_return(out);
    }

    fn global_ack(&self, success: bool, match_index: LogIndex) -> CdMessage {
        CdMessage::GlobalAck {
            global_term: self.global_term,
            domain: self.domain(),
            success,
            match_index,
            majority_index: if success { self.in_domain_commit.min(self.global_match) } else { 0 },
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn handle_global_ack(
        &mut self,
        now: SimTime,
        from: NodeId,
        global_term: Term,
        domain: DomainId,
        success: bool,
        match_index: LogIndex,
        majority_index: LogIndex,
        out: &mut Outbox<CdMessage>,
    ) {
        if global_term > self.global_term {
            self.observe_global_term(now, global_term);
            return;
        }
        if self.role != Role::GlobalLeader || global_term != self.global_term {
            return;
        }
        let last = self.log.last_index();
        let Some(p) = self.domains.get_mut(&domain) else { return };
        p.last_heard = now;
        p.suspected = false;
        let new_leader = p.leader != Some(from);
        if new_leader {
            // Its log position is unknown; probe from the end.
            p.leader = Some(from);
            p.dl_match = 0;
            p.next = last + 1;
        }
        if success {
            p.dl_match = p.dl_match.max(match_index);
            p.next = p.next.max(match_index + 1);
            p.majority_ack = p.majority_ack.max(majority_index);
            if new_leader {
                self.send_global_append(domain, out);
            }
            self.advance_global_commit(out);
            self.maybe_send_transfer(out);
        } else {
            p.next = (match_index + 1).min(p.next).max(p.dl_match + 1);
            self.send_global_append(domain, out);
        }
    }

    pub(crate) fn handle_commit_hint(
        &mut self,
        now: SimTime,
        from: NodeId,
        global_term: Term,
        index: LogIndex,
        out: &mut Outbox<CdMessage>,
    ) {
        self.observe_global_term(now, global_term);
        if global_term != self.global_term || !self.role.leads_domain() || self.role == Role::GlobalLeader {
            return;
        }
        if self.role == Role::GlobalCandidate {
            self.role = Role::DomainLeader;
            self.global_votes.clear();
        }
        self.global_leader = Some(from);
        self.reset_global_deadline(now);
        self.commit_hint = self.commit_hint.max(index);
        self.try_fast_return(out);
    }

    pub(crate) fn handle_domain_append(&mut self, now: SimTime, from: NodeId, msg: CdMessage, out: &mut Outbox<CdMessage>) {
        let CdMessage::DomainAppend { domain_term, global_term, global_leader, prev_index, prev_term, entries, commit } = msg
        else {
            return;
        };
        if domain_term < self.domain_term {
            let nack = CdMessage::DomainAck { domain_term: self.domain_term, success: false, match_index: 0, match_term: 0 };
            out.send(from, nack);
            return;
        }
        if domain_term > self.domain_term || self.role != Role::Follower {
            self.become_follower(now, domain_term);
        }
        self.domain_leader = Some(from);
        self.reset_domain_deadline(now);
        self.observe_global_term(now, global_term);
        if global_term == self.global_term && global_leader.is_some() {
            self.global_leader = global_leader;
        }
        if !self.log.matches(prev_index, prev_term) {
            let nack = CdMessage::DomainAck {
                domain_term,
                success: false,
                match_index: self.reject_hint(prev_index),
                match_term: 0,
            };
            out.send(from, nack);
            return;
        }
        if let Some(t) = self.log.merge(&entries) {
            self.on_truncate(t);
        }
        let last_new = prev_index + entries.len() as LogIndex;
        if commit > self.commit_index {
            self.commit_index = self.commit_index.max(commit.min(last_new));
            self.apply_committed(out);
        }
        let match_term = self.log.term_at(last_new).expect("merged prefix present");
        out.send(from, CdMessage::DomainAck { domain_term, success: true, match_index: last_new, match_term });
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn handle_domain_ack(
        &mut self,
        now: SimTime,
        from: NodeId,
        domain_term: Term,
        success: bool,
        match_index: LogIndex,
        match_term: Term,
        out: &mut Outbox<CdMessage>,
    ) {
        if domain_term > self.domain_term {
            self.become_follower(now, domain_term);
            return;
        }
        if !self.role.leads_domain() || domain_term != self.domain_term {
            return;
        }
        let term_ok = self.log.term_at(match_index) == Some(match_term);
        let Some(p) = self.followers.get_mut(&from) else { return };
        if success {
            // A mismatching term means the follower acknowledged a suffix
            // this leader has since replaced.
            if term_ok && match_index > p.matched {
                p.matched = match_index;
                p.next = p.next.max(match_index + 1);
            }
        } else {
            p.next = (match_index + 1).min(p.next).max(p.matched + 1);
            self.send_domain_append(from, out);
        }
        self.update_in_domain_commit(now, out);
    }

    /// Recomputes the index held by a majority of this domain and reacts to
    /// its advance.
    pub(crate) fn update_in_domain_commit(&mut self, _now: SimTime, out: &mut Outbox<CdMessage>) {
        if !self.role.leads_domain() {
            return;
        }
        let mut matched: Vec<LogIndex> = self.followers.values().map(|p| p.matched).collect();
        matched.push(self.log.last_index());
        matched.sort_unstable_by(|a, b| b.cmp(a));
        let idc = matched[majority(self.domain_size()) - 1];
        if idc <= self.in_domain_commit {
            return;
        }
        self.in_domain_commit = idc;
        if self.role == Role::GlobalLeader {
            let hint = CdMessage::GlobalCommitHint { global_term: self.global_term, index: idc };
            for (&d, p) in &self.domains {
                match p.leader {
                    Some(dl) if !p.suspected => out.send(dl, hint.clone()),
                    _ => {
                        for m in self.cfg.topology.domain_members(d) {
                            out.send(m, hint.clone());
                        }
                    }
                }
            }
            self.advance_global_commit(out);
        } else {
            if let Some(gl) = self.global_leader.filter(|_| self.global_match > 0) {
                out.send(gl, self.global_ack(true, self.global_match));
            }
            self.try_fast_return(out);
        }
    }

    /// Global leader: commit the longest prefix held by a majority of its own
    /// domain and a majority of at least one other domain.
    pub(crate) fn advance_global_commit(&mut self, out: &mut Outbox<CdMessage>) {
        if self.role != Role::GlobalLeader {
            return;
        }
        let candidate = match self.cfg.commit_rule {
            CommitRule::TwoDomain => {
                let best_remote = self.domains.values().map(|p| p.majority_ack).max().unwrap_or(0);
                self.in_domain_commit.min(best_remote)
            }
            CommitRule::LeaderDomainOnly => self.in_domain_commit,
        };
        let candidate = candidate.min(self.log.last_index());
        if candidate > self.commit_index && self.log.term_at(candidate) == Some(self.global_term) {
            self.commit_index = candidate;
            self.apply_committed(out);
        }
    }

    /// Highest index a domain leader may report as durable to its clients.
    fn fast_return_point(&self) -> LogIndex {
        let p = self.in_domain_commit.min(self.commit_hint).min(self.global_match);
        if p > 0 && self.log.term_at(p) == Some(self.global_term) {
            p.max(self.commit_index)
        } else {
            self.commit_index
        }
    }

    pub(crate) fn try_fast_return(&mut self, out: &mut Outbox<CdMessage>) {
        if !self.role.leads_domain() || self.role == Role::GlobalLeader {
            return;
        }
        let safe = self.fast_return_point();
        while let Some(entry) = self.fast_returns.first_entry() {
            if *entry.key() > safe {
                break;
            }
            let tag = entry.remove();
            out.respond(tag, ClientResult::WriteOk);
        }
    }

    /// Applies committed entries; the global leader also answers the writes
    /// and reads waiting on them.
    pub(crate) fn apply_committed(&mut self, out: &mut Outbox<CdMessage>) {
        while self.apply_index < self.commit_index {
            self.apply_index += 1;
            let e = self.log.get(self.apply_index).expect("committed entry present");
            if let Command::Put { key, value } = &e.command {
                self.kv.insert(key.clone(), value.clone());
            }
        }
        if self.role != Role::GlobalLeader {
            return;
        }
        while let Some(entry) = self.replies.first_entry() {
            if *entry.key() > self.apply_index {
                break;
            }
            out.respond(entry.remove(), ClientResult::WriteOk);
        }
        while self.reads.front().is_some_and(|r| r.read_index <= self.apply_index) {
            let r = self.reads.pop_front().expect("front checked");
            out.respond(r.tag, ClientResult::Value(self.kv.get(&r.key).cloned()));
        }
    }
}
