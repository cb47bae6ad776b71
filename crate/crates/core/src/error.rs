use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a single-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this tape")]
    DoubleBackward,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("audio too short: {len} samples, need at least {needed}")]
    AudioTooShort { len: usize, needed: usize },

    #[error("wav: {0}")]
    Wav(String),

    #[error("format: {0}")]
    Format(String),

    #[error("crc mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("incompatible inputs: {0}")]
    Incompatible(String),

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    /// `kind: message` on one line, without repeating the kind.
    pub fn one_line(&self) -> String {
        let msg = self.to_string().replace('\n', " ");
        let kind = self.kind();
        match msg.strip_prefix(kind).and_then(|m| m.strip_prefix(": ")) {
            Some(rest) => format!("{kind}: {rest}"),
            None => format!("{kind}: {msg}"),
        }
    }

    /// Short stable identifier used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::DoubleBackward => "double_backward",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::AudioTooShort { .. } => "audio_too_short",
            Error::Wav(_) => "wav",
            Error::Format(_) => "format",
            Error::Crc { .. } => "crc",
            Error::Version { .. } => "version",
            Error::Incompatible(_) => "incompatible",
            Error::NonFiniteGradient(_) => "non_finite_gradient",
            Error::Empty(_) => "empty",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
