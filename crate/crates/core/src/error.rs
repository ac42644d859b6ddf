use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("wav error in {path}: {message}")]
    Wav { path: PathBuf, message: String },
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("multichannel input ({channels} channels); only mono is supported")]
    Multichannel { channels: u16 },
    #[error("empty audio")]
    EmptyAudio,
    #[error("non-finite sample at index {index}")]
    NonFiniteSample { index: usize },
    #[error("rate mismatch: {0} Hz vs {1} Hz")]
    RateMismatch(u32, u32),
    #[error("length mismatch: {0} vs {1} samples")]
    LengthMismatch(usize, usize),
    #[error("invalid chunking: chunk {chunk_sec} s must exceed overlap {overlap_sec} s")]
    InvalidChunking { chunk_sec: f64, overlap_sec: f64 },
    #[error("{name} = {value} lies at or outside the bounds [{lo}, {hi}]")]
    OutOfBounds {
        name: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("invalid bounds for {0}")]
    InvalidBounds(&'static str),
    #[error("trace does not match input: {0}")]
    TraceMismatch(String),
    #[error("zero-energy reference signal")]
    ZeroEnergyReference,
    #[error("singular Hessian")]
    SingularHessian,
    #[error("direction is not a descent direction (g.v = {0})")]
    NotDescent(f64),
    #[error("non-finite {what} at iteration {iter}")]
    NonFinite { what: &'static str, iter: usize },
    #[error("unknown mode {0:?}")]
    UnknownMode(String),
    #[error("label {label} outside the fitted range [{lo}, {hi}]")]
    LabelOutOfRange { label: f64, lo: f64, hi: f64 },
    #[error("need at least 2 knots for mode {mode:?}, have {have}")]
    InsufficientKnots { mode: String, have: usize },
    #[error("duplicate label {label} in mode {mode:?}")]
    DuplicateLabel { label: f64, mode: String },
    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("unsupported file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
