//! Domain and global leader elections, and leadership transfer.

use super::*;
use crate::error::ProtocolError;
use crate::types::{candidate_is_current, Command};

impl CdNode {
    pub(crate) fn start_domain_election(&mut self, now: SimTime, out: &mut Outbox<CdMessage>) {
        if self.role.leads_domain() {
            return;
        }
        self.domain_term += 1;
        self.role = Role::DomainCandidate;
        self.voted_domain = Some(self.id);
        self.domain_leader = None;
        self.domain_votes = BTreeSet::from([self.id]);
        self.reset_domain_deadline(now);
        if self.domain_votes.len() >= majority(self.domain_size()) {
            self.become_domain_leader(now, out);
            return;
        }
        let (last_term, last_index) = self.log.last_position();
        for p in self.domain_peers() {
            out.send(p, CdMessage::DomainVoteRequest { domain_term: self.domain_term, last_term, last_index });
        }
    }

    pub(crate) fn handle_domain_vote_request(
        &mut self,
        now: SimTime,
        from: NodeId,
        domain_term: Term,
        candidate: (Term, LogIndex),
        out: &mut Outbox<CdMessage>,
    ) {
        if from.domain != self.domain() {
            return;
        }
        if domain_term > self.domain_term {
            self.become_follower(now, domain_term);
        }
        let granted = domain_term == self.domain_term
            && self.role == Role::Follower
            && self.voted_domain.is_none_or(|v| v == from)
            && candidate_is_current(candidate, self.log.last_position());
        if granted {
            self.voted_domain = Some(from);
            self.reset_domain_deadline(now);
        }
        out.send(from, CdMessage::DomainVoteResponse { domain_term: self.domain_term, granted });
    }

    pub(crate) fn handle_domain_vote_response(
        &mut self,
        now: SimTime,
        from: NodeId,
        domain_term: Term,
        granted: bool,
        out: &mut Outbox<CdMessage>,
    ) {
        if domain_term > self.domain_term {
            self.become_follower(now, domain_term);
            return;
        }
        if self.role != Role::DomainCandidate || domain_term != self.domain_term || !granted {
            return;
        }
        self.domain_votes.insert(from);
        if self.domain_votes.len() >= majority(self.domain_size()) {
            self.become_domain_leader(now, out);
        }
    }

    fn become_domain_leader(&mut self, now: SimTime, out: &mut Outbox<CdMessage>) {
        self.role = Role::DomainLeader;
        self.domain_leader = Some(self.id);
        self.domain_votes.clear();
        self.domain_deadline = SimTime::MAX;
        let next = self.log.last_index() + 1;
        self.followers = self.domain_peers().into_iter().map(|p| (p, FollowerProgress { next, matched: 0 })).collect();
        self.in_domain_commit = 0;
        self.global_match = 0;
        self.commit_hint = 0;
        self.fast_returns.clear();
        self.heartbeat_due = now + self.cfg.domain_heartbeat;
        self.reset_global_deadline(now);
        self.broadcast_domain_append(out);
        self.update_in_domain_commit(now, out);
        if let Some(gl) = self.global_leader.filter(|&g| g != self.id) {
            let hello = CdMessage::GlobalAck {
                global_term: self.global_term,
                domain: self.domain(),
                success: true,
                match_index: 0,
                majority_index: 0,
            };
            out.send(gl, hello);
        }
    }

    /// A domain leader campaigns for global leadership. Fails unless this
    /// node currently leads its domain without being global leader.
    pub fn start_global_election(&mut self, now: SimTime, out: &mut Outbox<CdMessage>) -> Result<(), ProtocolError> {
        if !matches!(self.role, Role::DomainLeader | Role::GlobalCandidate) {
            return Err(ProtocolError::InvalidTransition("only a domain leader can start a global election"));
        }
        self.global_term += 1;
        self.role = Role::GlobalCandidate;
        self.voted_global = Some(self.id);
        self.global_leader = None;
        self.global_match = 0;
        self.commit_hint = 0;
        self.global_votes = BTreeMap::from([(self.domain(), self.id)]);
        self.reset_global_deadline(now);
        if self.global_votes.len() >= self.cfg.global_quorum() {
            self.become_global_leader(now, out);
            return Ok(());
        }
        let (last_term, last_index) = self.log.last_position();
        let req = CdMessage::GlobalVoteRequest { global_term: self.global_term, last_term, last_index };
        for d in self.other_domains() {
            for m in self.cfg.topology.domain_members(d) {
                out.send(m, req.clone());
            }
        }
        Ok(())
    }

    pub(crate) fn handle_global_vote_request(
        &mut self,
        now: SimTime,
        from: NodeId,
        global_term: Term,
        candidate: (Term, LogIndex),
        out: &mut Outbox<CdMessage>,
    ) {
        // Only domain leaders take part in global elections.
        if !self.role.leads_domain() || from.domain == self.domain() {
            return;
        }
        self.observe_global_term(now, global_term);
        let granted = global_term == self.global_term
            && self.role == Role::DomainLeader
            && self.voted_global.is_none_or(|v| v == from)
            && candidate_is_current(candidate, self.log.last_position());
        if granted {
            self.voted_global = Some(from);
            self.reset_global_deadline(now);
        }
        out.send(from, CdMessage::GlobalVoteResponse { global_term: self.global_term, granted });
    }

    pub(crate) fn handle_global_vote_response(
        &mut self,
        now: SimTime,
        from: NodeId,
        global_term: Term,
        granted: bool,
        out: &mut Outbox<CdMessage>,
    ) {
        if global_term > self.global_term {
            self.observe_global_term(now, global_term);
            return;
        }
        if self.role != Role::GlobalCandidate || global_term != self.global_term || !granted {
            return;
        }
        self.global_votes.insert(from.domain, from);
        if self.global_votes.len() >= self.cfg.global_quorum() {
            self.become_global_leader(now, out);
        }
    }

    fn become_global_leader(&mut self, now: SimTime, out: &mut Outbox<CdMessage>) {
        let votes = std::mem::take(&mut self.global_votes);
        self.role = Role::GlobalLeader;
        self.global_leader = Some(self.id);
        self.global_deadline = SimTime::MAX;
        self.commit_hint = 0;
        self.fast_returns.clear();
        let next = self.log.last_index() + 1;
        self.domains = self
            .other_domains()
            .into_iter()
            .map(|d| {
                let leader = votes.get(&d).copied();
                let progress = DomainProgress {
                    leader,
                    next,
                    dl_match: 0,
                    majority_ack: 0,
                    last_heard: now,
                    suspected: leader.is_none(),
                };
                (d, progress)
            })
            .collect();
        self.term_start = self.log.push(self.global_term, Command::NoOp, self.domain(), None);
        self.global_match = self.term_start;
        self.rebuild_sessions();
        self.replies.clear();
        self.reads.clear();
        self.transfer = None;
        self.global_heartbeat_due = now + self.cfg.global_heartbeat;
        self.arm_placement(now);
        self.replicate(now, out);
    }

    pub(crate) fn handle_transfer_request(
        &mut self,
        now: SimTime,
        _from: NodeId,
        global_term: Term,
        target: DomainId,
        out: &mut Outbox<CdMessage>,
    ) {
        if global_term == self.global_term && self.role == Role::DomainLeader && target == self.domain() {
            let _ = self.start_global_election(now, out);
        }
    }

    /// Hands global leadership to `target` once its leader holds our whole
    /// log. New requests are redirected meanwhile.
    pub fn begin_transfer(&mut self, now: SimTime, target: DomainId, out: &mut Outbox<CdMessage>) -> Result<(), ProtocolError> {
        if self.role != Role::GlobalLeader {
            return Err(ProtocolError::InvalidTransition("only the global leader can transfer leadership"));
        }
        if target == self.domain() || !self.domains.get(&target).is_some_and(|p| p.leader.is_some() && !p.suspected) {
            return Err(ProtocolError::InvalidTransition("transfer target has no reachable domain leader"));
        }
        self.transfer = Some(Transfer { target, started: now, sent: false });
        self.migrations += 1;
        self.send_global_append(target, out);
        self.maybe_send_transfer(out);
        Ok(())
    }

    pub(crate) fn maybe_send_transfer(&mut self, out: &mut Outbox<CdMessage>) {
        let last = self.log.last_index();
        let Some(t) = self.transfer.as_mut() else { return };
        if t.sent {
            return;
        }
        let Some(p) = self.domains.get(&t.target) else { return };
        if let (Some(dl), true) = (p.leader, p.dl_match >= last) {
            t.sent = true;
            out.send(dl, CdMessage::GlobalTransfer { global_term: self.global_term, target_domain: t.target });
        }
    }
}
