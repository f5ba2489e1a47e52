use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Attention denominator fell below the guard in strict mode.
    #[error("degenerate attention denominator {denom:e} at row {row}")]
    DegenerateAttention { row: usize, denom: f32 },

    #[error("missing weight tensor `{0}`")]
    MissingWeight(String),

    #[error("duplicate weight tensor `{0}`")]
    DuplicateWeight(String),

    #[error("bad magic bytes {0:?}, expected `EDTW`")]
    BadMagic([u8; 4]),

    #[error("unsupported weight container version {0}, expected 1")]
    VersionMismatch(u32),

    #[error("truncated weight container: {0}")]
    Truncated(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
