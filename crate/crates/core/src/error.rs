use std::io;

use crate::tree::NodeId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid simulator spec: {0}")]
    InvalidSpec(String),
    #[error("invalid seed: {0}")]
    InvalidSeed(String),
    #[error("unstable params: {0}")]
    UnstableParams(String),
    #[error("numeric fault at step {step}, cell {cell}")]
    NumericFault { step: u64, cell: usize },
    #[error("out of order append: segment ends at {expected}, got step {got}")]
    OutOfOrderAppend { expected: u64, got: u64 },
    #[error("step {step} is not stored (stored range {start}..={end})")]
    StepNotStored { step: u64, start: u64, end: u64 },
    #[error("corrupt store: {0}")]
    CorruptStore(String),
    #[error("node {node} not yet simulated to step {step} (ends at {end})")]
    NotYetSimulated { node: NodeId, step: u64, end: u64 },
    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),
    #[error("invalid observation: {0}")]
    InvalidObservation(String),
    #[error("class counts must be at least 1 (got prefix {prefix}, suffix {suffix})")]
    InvalidClassCount { prefix: usize, suffix: usize },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("tree incomplete: node {0} is a leaf that is neither complete nor reused")]
    TreeIncomplete(NodeId),
    #[error("corrupt lineage for node {node}: {reason}")]
    CorruptLineage { node: NodeId, reason: String },
    #[error("max_workers must be at least 1")]
    InvalidWorkerCount,
    #[error("invalid probe: {0}")]
    InvalidProbe(String),
    #[error("invalid range {from}..{to}")]
    InvalidRange { from: u64, to: u64 },
    #[error("node {node} failed: {cause}")]
    NodeFailed { node: NodeId, cause: String },
    #[error("node {0} is already running")]
    NodeBusy(NodeId),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable name, used by the service and CLI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::InvalidSeed(_) => "InvalidSeed",
            Error::UnstableParams(_) => "UnstableParams",
            Error::NumericFault { .. } => "NumericFault",
            Error::OutOfOrderAppend { .. } => "OutOfOrderAppend",
            Error::StepNotStored { .. } => "StepNotStored",
            Error::CorruptStore(_) => "CorruptStore",
            Error::NotYetSimulated { .. } => "NotYetSimulated",
            Error::InvalidAnnotation(_) => "InvalidAnnotation",
            Error::InvalidObservation(_) => "InvalidObservation",
            Error::InvalidClassCount { .. } => "InvalidClassCount",
            Error::UnknownNode(_) => "UnknownNode",
            Error::TreeIncomplete(_) => "TreeIncomplete",
            Error::CorruptLineage { .. } => "CorruptLineage",
            Error::InvalidWorkerCount => "InvalidWorkerCount",
            Error::InvalidProbe(_) => "InvalidProbe",
            Error::InvalidRange { .. } => "InvalidRange",
            Error::NodeFailed { .. } => "NodeFailed",
            Error::NodeBusy(_) => "NodeBusy",
            Error::Config(_) => "Config",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }
}
