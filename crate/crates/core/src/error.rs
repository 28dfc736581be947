use thiserror::Error;

/// Unified error type for the whole crate.
///
/// The CLI maps variants onto process exit codes, so the split between
/// `Format`, `Contract`, and `Training` is part of the external interface:
/// malformed inputs, violated call contracts, and diverged optimization are
/// distinguishable failure modes.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes that do not line up (matmul inner dims, fusion operands, ...).
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A caller-supplied value outside its admissible range.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Inconsistent static configuration (e.g. model width not divisible by
    /// head count).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A cross-component call contract was violated (e.g. a trace built for a
    /// different target length than the loss was asked to score).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed external data: vocab files, dataset files, checkpoints.
    #[error("format error: {0}")]
    Format(String),

    /// The requested quantity does not exist (e.g. a CTC target longer than
    /// the frame sequence admits).
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// Optimization produced non-finite values.
    #[error("training diverged: {0}")]
    Training(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
