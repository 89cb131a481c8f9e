use std::path::PathBuf;

use mf_autodiff::AdError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AdError),

    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("time {t} is below the floor {floor}")]
    TimeBelowFloor { t: f64, floor: f64 },

    #[error("time {0} is outside [0, 1]")]
    TimeOutOfRange(f64),

    #[error("invalid interval r={r} > t={t}")]
    InvalidInterval { r: f64, t: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("frequency tables differ between networks")]
    FrequencyMismatch,

    #[error("non-finite loss (t={t}, |target|={target_norm})")]
    NonFiniteLoss { t: f64, target_norm: f64 },

    #[error("training diverged at step {step} (stage width {stage}, flow ratio {flow_ratio})")]
    Divergence {
        stage: f64,
        flow_ratio: f64,
        step: usize,
    },

    #[error("{0} signal has zero power")]
    SilentSignal(&'static str),

    #[error("stft: {0}")]
    Stft(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Error {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
