use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] teso_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: invalid TOML: {source}")]
    Toml {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("bad override {0:?}; expected dotted.key=value")]
    Override(String),
    #[error("missing artifact {0}; run the producing command first")]
    Missing(PathBuf),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const NUMERIC: i32 = 4;
    pub const TRANSPORT: i32 = 5;
    pub const IO: i32 = 6;
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub fn exit_code(&self) -> i32 {
        use teso_core::Error as E;
        match self {
            CliError::Core(E::Config(_)) | CliError::Toml { .. } | CliError::Override(_) => exit::CONFIG,
            CliError::Core(E::NonFinite(_)) => exit::NUMERIC,
            CliError::Core(E::Transport(_)) => exit::TRANSPORT,
            CliError::Core(_) | CliError::Json { .. } | CliError::Image { .. } | CliError::Missing(_) => exit::DATA,
            CliError::Io { .. } => exit::IO,
        }
    }
}
