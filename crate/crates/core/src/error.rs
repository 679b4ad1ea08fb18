use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    // --- container formats ---
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("dimension mismatch: header declares {declared} values, payload holds {actual}")]
    DimensionMismatch { declared: usize, actual: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("malformed file: {0}")]
    Malformed(String),

    // --- alignment ---
    #[error("line {line}: empty span [{start}, {end})")]
    EmptySpan { line: usize, start: usize, end: usize },
    #[error("line {line}: span starting at {start} overlaps the previous entry ending at {prev_end}")]
    Overlap { line: usize, start: usize, prev_end: usize },
    #[error("line {line}: {msg}")]
    AlignmentParse { line: usize, msg: String },
    #[error("span [{start}, {end}) exceeds {frames} frames")]
    SpanOutOfRange { start: usize, end: usize, frames: usize },

    // --- audio ---
    #[error("unsupported channel count {0}; only mono is accepted")]
    UnsupportedChannels(u16),
    #[error("unsupported sample format: {0}")]
    UnsupportedFormat(String),
    #[error("truncated wav payload")]
    Truncated,
    #[error("sample rate {actual} Hz does not match the filterbank design rate {expected} Hz")]
    RateMismatch { expected: u32, actual: u32 },

    // --- shape / argument contracts ---
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("grid too small: {frames}x{bins}, need at least {min_frames}x{min_bins}")]
    GridTooSmall {
        frames: usize,
        bins: usize,
        min_frames: usize,
        min_bins: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate dynamic range [{lo}, {hi}]")]
    DegenerateRange { lo: f64, hi: f64 },

    // --- density ---
    #[error("empty sample")]
    EmptySample,
    #[error("sample has zero variance; an explicit bandwidth is required")]
    ZeroVariance,
    #[error("phoneme {0:?} not present in any alignment")]
    PhonemeAbsent(String),
    #[error("bin {bin} out of range for {bins} bins")]
    BinOutOfRange { bin: usize, bins: usize },
    #[error("no valid pairs for the requested joint")]
    NoPairs,
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    // --- mixtures ---
    #[error("scale {value} below floor {floor}")]
    ScaleBelowFloor { value: f64, floor: f64 },
    #[error("mixture weights at cell {cell} sum to {sum}")]
    WeightsNotNormalized { cell: usize, sum: f64 },

    // --- flow / training ---
    #[error("model is not initialized")]
    Uninitialized,
    #[error("model is already initialized")]
    AlreadyInitialized,
    #[error("channel {0} is constant in the initialization batch")]
    DegenerateChannel(usize),
    #[error("channel mixing matrix of step {0} is singular")]
    SingularMatrix(usize),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("non-finite intermediate in {0}")]
    NonFiniteIntermediate(&'static str),

    // --- toy lab ---
    #[error("condition {0} has no samples")]
    EmptyCondition(usize),
    #[error("condition {condition}, mode {mode} has no samples")]
    EmptyCell { condition: usize, mode: usize },
    #[error("prototypes of condition {0} cannot be told apart from row 0")]
    IndistinguishablePrototypes(usize),
    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),
}

impl Error {
    /// True for errors caused by bad input or a violated contract, as opposed
    /// to environment failures or numerical breakdown.
    pub fn is_contract(&self) -> bool {
        !matches!(
            self,
            Error::Io(_) | Error::Diverged { .. } | Error::NonFiniteIntermediate(_)
        )
    }
}
