use std::path::PathBuf;

/// Errors produced anywhere in the detection pipeline and its harnesses.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("pose timestamp {got} ns is older than newest stored pose at {newest} ns")]
    PoseOrdering { got: u64, newest: u64 },

    #[error("pose buffer is empty")]
    NoPose,

    #[error("nearest pose is {gap_ns} ns away from {query_ns} ns (tolerance {tolerance_ns} ns)")]
    StalePose { query_ns: u64, gap_ns: u64, tolerance_ns: u64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("frame {width}x{height} is too small for a {size}x{size} crop")]
    FrameTooSmall { width: usize, height: usize, size: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("failed to load model {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("input layout is ambiguous for extents {0:?}; pass an explicit layout")]
    AmbiguousLayout(Vec<usize>),

    #[error("unsupported input extents {0:?}: no channel axis of size 3")]
    UnsupportedInput(Vec<i64>),

    #[error("inference failed on {backend} backend: {reason}")]
    Inference { backend: String, reason: String },

    #[error("backend {0} is not available in this build")]
    BackendUnavailable(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("ray does not intersect the placement plane in front of the camera")]
    NoIntersection,

    #[error("cannot plan tiles: {0}")]
    Plan(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("no configuration fits the {limit_ms} ms budget; fastest is {fastest_variant}@{fastest_size} at {fastest_ms:.2} ms")]
    InfeasibleBudget { limit_ms: f64, fastest_variant: String, fastest_size: usize, fastest_ms: f64 },

    #[error("parse error in {context}: {reason}")]
    Parse { context: String, reason: String },

    #[error("timing aborted after {completed} completed runs: {source}")]
    TimingAborted {
        completed: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
