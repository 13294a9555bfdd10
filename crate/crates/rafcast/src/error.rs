use std::io;
use std::path::PathBuf;

/// Problems with a binary container file.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic bytes {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported format version {found} (this build reads {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },
    #[error("checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("file truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("{extra} unexpected bytes after the checksum")]
    TrailingBytes { extra: usize },
    #[error("malformed metadata: {0}")]
    Metadata(String),
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Format { path: PathBuf, source: FormatError },
    #[error(transparent)]
    Core(#[from] rafcast_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const CONFIG: u8 = 1;
    pub const DATA: u8 = 2;
    pub const NUMERIC: u8 = 3;
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        use rafcast_core::Error as C;
        match self {
            Self::Config(_) => exit::CONFIG,
            Self::Data(_) | Self::Io { .. } | Self::Format { .. } => exit::DATA,
            Self::Core(c) => match c {
                C::DimensionMismatch { .. } | C::Config(_) | C::Frozen => exit::CONFIG,
                C::Empty(_) | C::NotNormalized { .. } | C::InsufficientCandidates { .. } | C::InsufficientWindows { .. } => {
                    exit::DATA
                }
                C::NonFinite(_) | C::Diverged { .. } | C::NoGradients => exit::NUMERIC,
            },
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Self::Config(e.to_string())
    }
}
