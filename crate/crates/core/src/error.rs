use thiserror::Error;

/// Errors raised by the mapping pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("degenerate segment: endpoints closer than 1e-9 m")]
    DegenerateSegment,
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("invalid polyline: {0}")]
    InvalidPolyline(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("scan frame contains no points")]
    EmptyFrame,
    #[error("frame does not overlap the local grid map")]
    PoseOutOfBounds,
    #[error("timestamps are not strictly increasing ({previous} -> {current})")]
    NonMonotonicTime { previous: f64, current: f64 },
    #[error("virtual scan origin lies outside the grid")]
    OriginOutsideGrid,
    #[error("no node-to-line correspondences within the rejection threshold")]
    NoCorrespondences,
    #[error("normal equations are singular (condition number {condition:.3e})")]
    SingularSystem { condition: f64 },
    #[error("ground-truth motion is zero; relative error undefined")]
    ZeroMotion,
    #[error("polylines have different boundary kinds")]
    KindMismatch,
    #[error("polylines do not intersect")]
    NoIntersections,
    #[error("pose graph is not connected to the anchor node")]
    DisconnectedGraph,
    #[error("information matrix of edge {edge} is not symmetric positive definite")]
    NonPositiveDefinite { edge: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("pose lies outside the simulated scene")]
    PoseOutsideScene,
    #[error("parse error: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
