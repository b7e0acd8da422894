use thiserror::Error;

/// Errors raised while building graphs, evaluating losses or running the solver.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("empty window: need at least 2 frames, got {0}")]
    EmptyWindow(usize),

    #[error("window too wide: {frames} frames exceeds configured window {window}")]
    WindowTooWide { frames: usize, window: usize },

    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("detections are not in consecutive frames ({from} -> {to})")]
    NonConsecutive { from: usize, to: usize },

    #[error("matrix is not symmetric (|a[{i},{j}] - a[{j},{i}]| = {diff:e})")]
    AsymmetricInput { i: usize, j: usize, diff: f64 },

    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("eigensolver did not converge within {0} rotations")]
    NonConvergence(usize),

    #[error("invalid frame interval dt = {0}")]
    InvalidDt(f64),

    #[error("balance vector missing or sized {got}, expected {expected}")]
    MissingBalance { expected: usize, got: usize },

    #[error("detection in frame {frame} has no ground-truth id")]
    MissingGtId { frame: usize },

    #[error("loss diverged: initial {initial}, final {final_loss}")]
    DivergenceDetected { initial: f64, final_loss: f64 },

    #[error("occlusion gap {gap} too long for {n_frames} frames")]
    GapTooLong { gap: usize, n_frames: usize },

    #[error("invalid rate: {0}")]
    InvalidRate(String),

    #[error("match radius must be positive, got {0}")]
    RadiusNonPositive(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("json error: {0}")]
    Json(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e.to_string())
    }
}
