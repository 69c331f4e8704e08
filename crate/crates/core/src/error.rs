use thiserror::Error;

pub type Result<T, E = PcpError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PcpError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("capability not available: {0}")]
    Capability(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("degenerate model: {0}")]
    Degenerate(String),

    #[error("bridge protocol error: {message}{}", fmt_stderr(.stderr))]
    Protocol { message: String, stderr: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn fmt_stderr(stderr: &str) -> String {
    if stderr.trim().is_empty() {
        String::new()
    } else {
        format!(" (child stderr: {})", stderr.trim())
    }
}

impl PcpError {
    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        PcpError::Precondition(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        PcpError::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        PcpError::Data(msg.into())
    }

    pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
        if expected == got {
            Ok(())
        } else {
            Err(PcpError::Dimension { expected, got })
        }
    }
}
