use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported modulation order {0} (expected 2, 4, 16 or 64)")]
    UnsupportedOrder(u32),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: String,
        got: String,
    },

    #[error("singular equalizer: channel estimate on subcarrier {subcarrier} has magnitude {magnitude:e}")]
    SingularEqualizer { subcarrier: i32, magnitude: f64 },

    #[error("pilot accumulator is zero on data symbol {symbol}")]
    DegeneratePilots { symbol: usize },

    #[error("insufficient data: need at least {needed} symbols, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("calibration history is empty")]
    EmptyHistory,

    #[error("location {0} is out of range for this scene")]
    LocationOutOfRange(u16),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("feature kind mismatch: model expects {expected}, got {got}")]
    KindMismatch { expected: String, got: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("malformed {what} at byte offset {offset}: {msg}")]
    Format {
        what: &'static str,
        offset: u64,
        msg: String,
    },

    #[error("packet {index}: {source}")]
    Packet {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_mismatch(
    what: &'static str,
    expected: impl std::fmt::Display,
    got: impl std::fmt::Display,
) -> Error {
    Error::DimensionMismatch {
        what,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
