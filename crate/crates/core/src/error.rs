use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid value for `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("microphone index {index} out of range for a {count}-microphone array")]
    MicIndexOutOfRange { index: usize, count: usize },

    #[error("DFT bin {bin} out of range for a {len}-point transform")]
    BinOutOfRange { bin: usize, len: usize },

    #[error("{what} at ({x:.3}, {y:.3}, {z:.3}) is not strictly inside the room")]
    OutsideRoom { what: String, x: f64, y: f64, z: f64 },

    #[error("probe spectrum has zero energy; gain is undefined")]
    ZeroEnergyProbe,

    #[error("delay search grid is empty")]
    EmptySearchGrid,

    #[error("covariance matrix is singular (regularize before beamforming)")]
    SingularMatrix,

    #[error("signal of {len} samples is shorter than one {frame}-sample frame")]
    TooShort { len: usize, frame: usize },

    #[error("training data contains a single class")]
    SingleClass,

    #[error("channel count mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("sample rate mismatch: {a} Hz vs {b} Hz")]
    SampleRateMismatch { a: f64, b: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

impl Error {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Qualifies the field of a parameter error with the config section it
    /// came from; other errors pass through.
    pub fn in_section(self, section: &str) -> Self {
        match self {
            Error::InvalidParameter { field, reason } => Error::InvalidParameter {
                field: format!("{section}.{field}"),
                reason,
            },
            other => other,
        }
    }

    /// True for failures caused by numerically degenerate input rather than
    /// by malformed parameters or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::ZeroEnergyProbe | Error::SingularMatrix | Error::EmptySearchGrid | Error::SingleClass
        )
    }
}
