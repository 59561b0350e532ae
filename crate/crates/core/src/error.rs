//! Error type shared across the pipeline.

use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong in the pipeline, from file parsing to
/// training divergence. Variants are grouped roughly by module.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: not a RIFF/WAVE file")]
    NotWave { path: PathBuf },

    #[error("{path}: unsupported wav encoding ({found})")]
    UnsupportedFormat { path: PathBuf, found: String },

    #[error("{path}: corrupt wav file: {detail}")]
    CorruptFile { path: PathBuf, detail: String },

    #[error("invalid audio: {0}")]
    InvalidAudio(String),

    #[error("channel {index} out of range for {channels}-channel clip")]
    ChannelOutOfRange { index: usize, channels: usize },

    #[error("operation requires a mono clip ({channels} channels given)")]
    NotMono { channels: usize },

    #[error("statistic undefined on an empty clip")]
    EmptyClip,

    #[error("cannot set an SNR against a silent component")]
    CannotSetSnr,

    #[error("sample rates differ: {a} Hz vs {b} Hz")]
    RateMismatch { a: u32, b: u32 },

    #[error("out of range: {0}")]
    Range(String),

    #[error("clip of {len} samples is shorter than the {n_fft}-sample analysis window")]
    TooShort { len: usize, n_fft: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("unrecognized dataset layout at {path}")]
    Layout { path: PathBuf },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("non-finite gradient in {layer}")]
    NonFiniteGradient { layer: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
