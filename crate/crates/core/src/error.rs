use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand extents do not line up for the requested operation.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A configuration value failed validation. `field` is a dotted path such
    /// as `loss.gamma`.
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// Malformed input data. `line` is 1-based when known.
    #[error("parse error{}: {reason}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse { line: Option<usize>, reason: String },

    #[error("tape error: {0}")]
    Tape(String),

    #[error("assignment has neither positive nor negative anchors")]
    EmptyAssignment,

    #[error("training set is empty")]
    EmptyTrainingSet,

    #[error("image ids do not line up: {0}")]
    ImageMismatch(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn parse(line: Option<usize>, reason: impl Into<String>) -> Self {
        Error::Parse {
            line,
            reason: reason.into(),
        }
    }
}
