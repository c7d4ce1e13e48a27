use nbafl_core::Error as CoreError;

/// Failures of a command, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("audit failed: estimate {estimate:.3e} exceeds delta {delta} + {half_width:.3e}")]
    AuditFailed { estimate: f64, delta: f64, half_width: f64 },

    #[error("{failed} of {total} sweep cells failed")]
    SweepFailed { failed: usize, total: usize },
}

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Self::Io {
            context: context.into(),
            source,
        }
    }

    /// 1 io, 2 invalid input or calibration domain, 3 solver divergence,
    /// 4 failed audit, 5 failed sweep cells.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } => 1,
            CliError::Config(_) => 2,
            CliError::Core(e) => match e {
                CoreError::Io(_) | CoreError::Idx(_) => 1,
                CoreError::Divergence { .. } | CoreError::RoundDivergence { .. } => 3,
                _ => 2,
            },
            CliError::AuditFailed { .. } => 4,
            CliError::SweepFailed { .. } => 5,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
