use thiserror::Error;

/// Errors raised by the numeric core, the model, and the artifact codecs.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{op} requires a square matrix, got {rows}x{cols}")]
    NotSquare {
        op: &'static str,
        rows: usize,
        cols: usize,
    },

    #[error("eigensolver did not converge after {sweeps} sweeps (off-diagonal norm {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value at step {step}: {what}")]
    NonFinite { step: usize, what: String },

    #[error("missing sliced weights for block {block} {kind}")]
    MissingSliced { block: usize, kind: &'static str },

    #[error("empty calibration capture")]
    EmptyCalibration,

    #[error("infeasible drift {value} at step {step} (limit 2.0)")]
    InfeasibleDrift { step: usize, value: f64 },

    #[error("SSIM needs a square token grid, got {tokens} tokens; use rel_l2 instead")]
    NonSquareTokens { tokens: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("bad container: {0}")]
    Container(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
