use painet::data::DataError;
use painet::metrics::MetricsError;
use painet::model::ModelError;
use painet::verify::VerifyError;

/// Failure of a command, carrying its process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numeric(String),
    #[error("property check failed: {}", .0.join("; "))]
    Property(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Io(_) => 1,
            Self::Usage(_) => 2,
            Self::Numeric(_) => 3,
            Self::Property(_) => 4,
        }
    }

    pub fn io(context: impl std::fmt::Display, e: impl std::fmt::Display) -> Self {
        Self::Io(format!("{context}: {e}"))
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(_) => Self::Usage(e.to_string()),
            DataError::Unstable { .. } => Self::Numeric(e.to_string()),
            DataError::Parse { .. } | DataError::Io(_) => Self::Io(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => Self::Usage(e.to_string()),
            ModelError::NonFinite { .. } | ModelError::Attention(_) | ModelError::Tensor(_) => {
                Self::Numeric(e.to_string())
            }
            ModelError::State(_)
            | ModelError::ShapeMismatch(_)
            | ModelError::EmptyDataset
            | ModelError::Version { .. }
            | ModelError::Corrupt(_)
            | ModelError::Io(_)
            | ModelError::Graph(_) => Self::Io(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Model(m) => m.into(),
            other => Self::Io(other.to_string()),
        }
    }
}

impl From<VerifyError> for CliError {
    fn from(e: VerifyError) -> Self {
        match e {
            VerifyError::UnknownSuite(_) => Self::Usage(e.to_string()),
            VerifyError::Trial(_) => Self::Numeric(e.to_string()),
        }
    }
}
