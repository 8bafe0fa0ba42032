//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range or inconsistent. Names the field.
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    /// Vector/matrix dimensionality mismatch.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// A training set contains only one class.
    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    /// A clicked record is missing its post-ranking signals.
    #[error("record {0} has no post-ranking signals")]
    MissingSignal(u64),

    /// A soft label is not covered by the group-membership map.
    #[error("record {0} has no group membership entry")]
    MissingMembership(u64),

    /// A membership entry points at a group that was never aggregated.
    #[error("group ({target_app}, token {token}, window {window}) not found")]
    MissingGroup {
        target_app: u32,
        token: u8,
        window: i64,
    },

    /// A group label asks for more conversions than the group has members.
    #[error(
        "infeasible calibration target for group ({target_app}, token {token}, \
         window {window}): {target} conversions > {size} members"
    )]
    InfeasibleTarget {
        target_app: u32,
        token: u8,
        window: i64,
        target: u64,
        size: usize,
    },

    /// Metric undefined for the given inputs (e.g. single-class PR-AUC).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A cross-entropy label fell outside [0, 1].
    #[error("label {0} outside [0, 1]")]
    LabelDomain(f64),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Divergence { epoch: usize },

    /// A precondition on an operation's inputs was violated.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// A pipeline stage failed; wraps the underlying error with the stage name.
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    /// A sweep failed partway; carries the cells completed before the failure.
    #[error("sweep failed in stage {stage}: {source}")]
    SweepFailed {
        stage: String,
        #[source]
        source: Box<Error>,
        completed: Vec<crate::eval::CellReport>,
    },

    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: std::path::PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("malformed {what} at {path}, line {line}: {reason}")]
    Parse {
        what: &'static str,
        path: std::path::PathBuf,
        line: usize,
        reason: String,
    },

    #[error("{path}: {source}")]
    TomlParse {
        path: std::path::PathBuf,
        #[source]
        source: Box<toml::de::Error>,
    },
}

impl Error {
    pub fn config(field: &str, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    /// Wrap an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for errors callers should treat as bad configuration rather
    /// than a runtime/data failure.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config { .. } | Error::TomlParse { .. } => true,
            Error::Stage { source, .. } => source.is_config(),
            Error::SweepFailed { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
