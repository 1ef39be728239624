use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("channel divisibility: {channels} channels not divisible by {divisor}")]
    ChannelDivisibility { channels: usize, divisor: usize },

    #[error("parity error: spatial extents {h}x{w} must both be even")]
    Parity { h: usize, w: usize },

    #[error("fully masked row {row}: every logit is -inf")]
    FullyMaskedRow { row: usize },

    #[error("rank error: {0}")]
    Rank(String),

    #[error("partition error: {h}x{w} not divisible by window {window}")]
    Partition { h: usize, w: usize, window: usize },

    #[error("unsupported shift {shift} for window {window}; expected {expected}")]
    UnsupportedShift { shift: usize, window: usize, expected: usize },

    #[error("mask consistency error: {0}")]
    MaskConsistency(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("wiring error: {0}")]
    Wiring(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("bad magic {found:?}; expected \"MTSR\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported tensor file version {0}")]
    BadVersion(u8),

    #[error("unsupported tensor dtype {0}")]
    BadDtype(u8),

    #[error("corrupt tensor file: {0}")]
    Corrupt(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    /// Stable machine-readable identifier.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::ChannelDivisibility { .. } => "channel_divisibility",
            Error::Parity { .. } => "parity",
            Error::FullyMaskedRow { .. } => "fully_masked_row",
            Error::Rank(_) => "rank",
            Error::Partition { .. } => "partition",
            Error::UnsupportedShift { .. } => "unsupported_shift",
            Error::MaskConsistency(_) => "mask_consistency",
            Error::Config(_) => "config",
            Error::Wiring(_) => "wiring",
            Error::Eval(_) => "eval",
            Error::BadMagic { .. } => "format_bad_magic",
            Error::BadVersion(_) => "format_bad_version",
            Error::BadDtype(_) => "format_bad_dtype",
            Error::Corrupt(_) => "format_corrupt",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::BadMagic { .. } => 10,
            Error::BadVersion(_) => 11,
            Error::BadDtype(_) => 12,
            Error::Corrupt(_) => 13,
            Error::Io(_) => 14,
            Error::Json(_) | Error::Config(_) => 3,
            _ => 1,
        }
    }
}
