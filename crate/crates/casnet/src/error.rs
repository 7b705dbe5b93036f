use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("{}: line {line}: {message}", path.display())]
    Parse { path: PathBuf, line: u64, message: String },
    #[error(transparent)]
    Core(#[from] casnet_core::Error),
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// Process exit status: 2 config, 3 I/O, 4 format, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use casnet_core::Error as E;
        match self {
            Self::Config(_) | Self::Core(E::Lookup(_) | E::Parameter(_)) => 2,
            Self::Io { .. } => 3,
            Self::Format { .. } | Self::Parse { .. } | Self::Core(E::Shape(_)) => 4,
            Self::Core(_) => 1,
        }
    }
}
