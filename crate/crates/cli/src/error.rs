use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    /// A decode hit its iteration safety valve.
    #[error("aborted: {0}")]
    Abort(String),

    #[error("analysis input error: {0}")]
    AnalysisInput(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(sjdvp_core::Error),
}

impl CliError {
    /// 2 config, 3 abort, 4 analysis input, 1 anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Abort(_) => 3,
            CliError::AnalysisInput(_) => 4,
            CliError::Io { .. } | CliError::Core(_) => 1,
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

impl From<sjdvp_core::Error> for CliError {
    fn from(e: sjdvp_core::Error) -> Self {
        use sjdvp_core::Error as E;
        match e {
            E::Config(m) => CliError::Config(m),
            E::Abort(m) => CliError::Abort(m),
            E::AnalysisInput(m) => CliError::AnalysisInput(m),
            other => CliError::Core(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
