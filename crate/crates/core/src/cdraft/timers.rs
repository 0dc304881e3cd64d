//! Heartbeats, election deadlines, failure suspicion and periodic leader
//! placement.

use super::*;
use crate::placement::{maybe_migrate, optimal_domain};

impl CdNode {
    pub(crate) fn next_timer(&self) -> SimTime {
        match self.role {
            Role::Follower | Role::DomainCandidate => self.domain_deadline,
            Role::DomainLeader | Role::GlobalCandidate => self.heartbeat_due.min(self.global_deadline),
            Role::GlobalLeader => {
                let transfer_abort = self
                    .transfer
                    .as_ref()
                    .map_or(SimTime::MAX, |t| t.started + self.cfg.max_global_election_timeout());
                self.heartbeat_due.min(self.global_heartbeat_due).min(self.next_placement).min(transfer_abort)
            }
        }
    }

    pub(crate) fn tick(&mut self, now: SimTime, out: &mut Outbox<CdMessage>) {
        if !self.role.leads_domain() {
            if now >= self.domain_deadline {
                self.start_domain_election(now, out);
            }
            return;
        }
        if now >= self.heartbeat_due {
            self.domain_heartbeat(now, out);
        }
        if matches!(self.role, Role::DomainLeader | Role::GlobalCandidate) && now >= self.global_deadline {
            let _ = self.start_global_election(now, out);
        }
        if self.role != Role::GlobalLeader {
            return;
        }
        if now >= self.global_heartbeat_due {
            self.global_heartbeat(now, out);
        }
        if self.transfer.as_ref().is_some_and(|t| now >= t.started + self.cfg.max_global_election_timeout()) {
            self.transfer = None;
        }
        if now >= self.next_placement {
            self.evaluate_placement(now, out);
        }
    }

    pub(crate) fn domain_heartbeat(&mut self, now: SimTime, out: &mut Outbox<CdMessage>) {
        self.broadcast_domain_append(out);
        self.heartbeat_due = now + self.cfg.domain_heartbeat;
    }

    pub(crate) fn global_heartbeat(&mut self, now: SimTime, out: &mut Outbox<CdMessage>) {
        let limit = self.cfg.global_heartbeat.mul(self.cfg.suspect_after_ticks);
        let silent: Vec<DomainId> = self
            .domains
            .iter()
            .filter(|(_, p)| !p.suspected && now.saturating_sub(p.last_heard) > limit)
            .map(|(&d, _)| d)
            .collect();
        for d in silent {
            self.handle_unavailable_domain(d);
        }
        for d in self.other_domains() {
            self.send_global_append(d, out);
        }
        self.global_heartbeat_due = now + self.cfg.global_heartbeat;
    }

    /// Marks `d` as possibly down: its traffic is broadcast to all of its
    /// members until a domain leader answers again, and placement treats it
    /// as unavailable.
    pub fn handle_unavailable_domain(&mut self, d: DomainId) {
        if let Some(p) = self.domains.get_mut(&d) {
            p.suspected = true;
        }
    }

    pub(crate) fn arm_placement(&mut self, now: SimTime) {
        self.load.clear();
        self.next_placement = match &self.cfg.placement {
            Some(setup) => now + setup.policy.period,
            None => SimTime::MAX,
        };
    }

    fn evaluate_placement(&mut self, now: SimTime, out: &mut Outbox<CdMessage>) {
        let Some(setup) = self.cfg.placement.clone() else { return };
        if self.transfer.is_none() && self.load.total() > 0 {
            let avail: Vec<bool> = self
                .cfg
                .topology
                .domains()
                .map(|d| d == self.domain() || self.domains.get(&d).is_some_and(|p| !p.suspected))
                .collect();
            if let Ok(eval) = optimal_domain(&setup.latency, &self.load, &avail) {
                if let Some(t) = maybe_migrate(self.domain(), &eval) {
                    let _ = self.begin_transfer(now, t.target_domain, out);
                }
            }
        }
        self.load.clear();
        self.next_placement = now + setup.policy.period;
    }
}
