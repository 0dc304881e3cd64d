use thiserror::Error;

/// Invalid or unloadable configuration (scenario files, topologies,
/// placement policies).
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: String, message: String },
}

/// Errors raised when a protocol operation is invoked in a role that does not
/// allow it.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("invalid transition: {0}")]
    InvalidTransition(&'static str),
}

/// The placement model has no defined value for the given input.
#[derive(Debug, Error, PartialEq)]
pub enum PlacementError {
    #[error("placement infeasible: {0}")]
    Infeasible(String),
    #[error("placement period {period_ms}ms is shorter than {min_ratio} x max RTT ({max_rtt_ms}ms)")]
    PeriodTooShort { period_ms: f64, min_ratio: f64, max_rtt_ms: f64 },
}

/// A trace could not be interpreted.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum TraceError {
    #[error("no response for request {0} in trace")]
    NoResponse(String),
    #[error("causal chain for request {0} does not reach its invocation")]
    BrokenChain(String),
    #[error("schedule step {step} cannot be replayed: {reason}")]
    Replay { step: usize, reason: String },
}
