use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // file formats
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("bad magic tag: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported pixel format {0}")]
    UnsupportedPixelFormat(u8),
    #[error("payload size mismatch: header declares {expected} bytes, file holds {actual}")]
    TruncatedPayload { expected: u64, actual: u64 },
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
    #[error("disk full while writing {0}")]
    DiskFull(PathBuf),

    // video / distortion pipeline
    #[error("invalid video: {0}")]
    InvalidVideo(String),
    #[error("source frame rate {0} is not a member of the generator frame-rate set")]
    UnsupportedSourceRate(String),
    #[error("source {width}x{height} is below the 320x240 floor")]
    SourceTooSmall { width: usize, height: usize },
    #[error("target frame rate {target} exceeds source rate {source_fps}")]
    RateIncrease { target: u32, source_fps: String },
    #[error("zero output dimension")]
    ZeroDimension,
    #[error("encoder failure: {0}")]
    EncoderFailure(String),
    #[error("compression backend unavailable: {0}")]
    BackendUnavailable(String),

    // temporal transform / features
    #[error("signal of length {len} is shorter than the minimum {min}")]
    SignalTooShort { len: usize, min: usize },
    #[error("frame {width}x{height} is smaller than 16x16")]
    FrameTooSmall { width: usize, height: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    // model
    #[error("degenerate embedding: pooled state has (near) zero norm")]
    DegenerateEmbedding,
    #[error("backward called without a cached forward pass")]
    MissingForwardCache,

    // objective
    #[error("cosine similarity of a zero vector")]
    ZeroVector,
    #[error("item {0} has no positive partner in the batch")]
    NoPositives(usize),
    #[error("UGC item {index} has {count} positives, expected exactly one")]
    MultiplePositives { index: usize, count: usize },
    #[error("empty batch")]
    EmptyBatch,

    // trainer
    #[error("insufficient population: need {needed} {population} samples, have {available}")]
    InsufficientPopulation { population: &'static str, needed: usize, available: usize },
    #[error("non-finite loss at step {0}")]
    NanLoss(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    // evaluation
    #[error("too few frames: need at least {needed}, have {available}")]
    TooFewFrames { needed: usize, available: usize },
    #[error("singular system in ridge regression (lambda = 0 with rank-deficient design)")]
    SingularSystem,
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),
    #[error("too few contents: {0}")]
    TooFewContents(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Maps an I/O error raised while writing `path`, separating out ENOSPC.
    pub(crate) fn from_write(err: io::Error, path: impl Into<PathBuf>) -> Self {
        if err.kind() == io::ErrorKind::StorageFull || err.raw_os_error() == Some(28) {
            Error::DiskFull(path.into())
        } else {
            Error::Io(err)
        }
    }

    pub(crate) fn from_open(err: io::Error, path: impl Into<PathBuf>) -> Self {
        if err.kind() == io::ErrorKind::NotFound {
            Error::MissingFile(path.into())
        } else {
            Error::Io(err)
        }
    }
}
