use crate::protocol::{MessageInfo, SizeClass};
use crate::types::{DomainId, LogEntry, LogIndex, NodeId, Term};

/// Server-to-server messages of the two-tier protocol.
///
/// Global-tier messages travel between the global leader and the domain
/// leaders; domain-tier messages stay inside one domain.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CdMessage {
    /// Global leader to a domain leader: replicate `entries` after
    /// `(prev_index, prev_term)`. Empty `entries` is a heartbeat.
    /// `commit_hint` is the leader's in-domain commit index.
    GlobalAppend {
        global_term: Term,
        prev_index: LogIndex,
        prev_term: Term,
        entries: Vec<LogEntry>,
        leader_commit: LogIndex,
        commit_hint: LogIndex,
    },
    /// Domain leader to global leader. `match_index` is how far the domain
    /// leader's log is known to equal the global leader's; `majority_index`
    /// is the part of that prefix held by a majority of the domain. On
    /// failure `match_index` is a back-off hint.
    GlobalAck {
        global_term: Term,
        domain: DomainId,
        success: bool,
        match_index: LogIndex,
        majority_index: LogIndex,
    },
    /// Global leader to domain leaders: its own domain holds `index` on a
    /// majority.
    GlobalCommitHint { global_term: Term, index: LogIndex },
    /// Domain leader (or the global leader inside its own domain) to its
    /// followers.
    DomainAppend {
        domain_term: Term,
        global_term: Term,
        global_leader: Option<NodeId>,
        prev_index: LogIndex,
        prev_term: Term,
        entries: Vec<LogEntry>,
        commit: LogIndex,
    },
    /// Follower to its domain leader. On success, `(match_index, match_term)`
    /// names the last entry known to match; on failure `match_index` is a
    /// back-off hint.
    DomainAck { domain_term: Term, success: bool, match_index: LogIndex, match_term: Term },
    DomainVoteRequest { domain_term: Term, last_term: Term, last_index: LogIndex },
    DomainVoteResponse { domain_term: Term, granted: bool },
    GlobalVoteRequest { global_term: Term, last_term: Term, last_index: LogIndex },
    GlobalVoteResponse { global_term: Term, granted: bool },
    /// Global leader to the target domain leader: start a global election
    /// now.
    GlobalTransfer { global_term: Term, target_domain: DomainId },
}

impl MessageInfo for CdMessage {
    fn variant(&self) -> &'static str {
        match self {
            CdMessage::GlobalAppend { .. } => "GlobalAppend",
            CdMessage::GlobalAck { .. } => "GlobalAck",
            CdMessage::GlobalCommitHint { .. } => "GlobalCommitHint",
            CdMessage::DomainAppend { .. } => "DomainAppend",
            CdMessage::DomainAck { .. } => "DomainAck",
            CdMessage::DomainVoteRequest { .. } => "DomainVoteRequest",
            CdMessage::DomainVoteResponse { .. } => "DomainVoteResponse",
            CdMessage::GlobalVoteRequest { .. } => "GlobalVoteRequest",
            CdMessage::GlobalVoteResponse { .. } => "GlobalVoteResponse",
            CdMessage::GlobalTransfer { .. } => "GlobalTransfer",
        }
    }

    fn size_class(&self) -> SizeClass {
        match self {
            CdMessage::GlobalAppend { entries, .. } | CdMessage::DomainAppend { entries, .. } if !entries.is_empty() => {
                SizeClass::Data
            }
            _ => SizeClass::Control,
        }
    }
}
