use thiserror::Error;

pub type Result<T> = std::result::Result<T, NsnError>;

#[derive(Debug, Error)]
pub enum NsnError {
    #[error("dimension mismatch: {op} got {left} and {right}")]
    Dimension {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("rank {rank} out of range 1..={max_rank}")]
    Rank { rank: usize, max_rank: usize },

    #[error("rank ordering violated: variant {variant} must be below anchor {anchor}")]
    RankOrder { anchor: usize, variant: usize },

    #[error("svd did not converge after {sweeps} sweeps (off-diagonal {off_diagonal:e})")]
    SvdNoConvergence { sweeps: usize, off_diagonal: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("label {label} out of range for {num_classes} classes")]
    Label { label: usize, num_classes: usize },

    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("surgery plan error: {0}")]
    Plan(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    Magic { expected: String, found: String },

    #[error("unsupported format version {0}")]
    Version(u32),

    #[error("checkpoint digest mismatch: header says {expected}, payload hashes to {actual}")]
    Digest { expected: String, actual: String },

    #[error("unsupported analysis: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl NsnError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        NsnError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            NsnError::Config { .. }
            | NsnError::Plan(_)
            | NsnError::Unsupported(_)
            | NsnError::Rank { .. }
            | NsnError::RankOrder { .. }
            | NsnError::Dimension { .. } => 2,
            NsnError::Label { .. }
            | NsnError::Parse { .. }
            | NsnError::Truncated { .. }
            | NsnError::Magic { .. }
            | NsnError::Version(_)
            | NsnError::Digest { .. }
            | NsnError::Io(_)
            | NsnError::Json(_)
            | NsnError::Csv(_) => 3,
            NsnError::SvdNoConvergence { .. }
            | NsnError::NonFinite(_)
            | NsnError::Divergence { .. } => 4,
        }
    }
}
