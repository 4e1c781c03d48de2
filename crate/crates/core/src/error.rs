use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("unsupported WFDB signal format {0} (only format 16 is supported)")]
    UnsupportedFormat(u32),
    #[error("truncated signal file {path}: expected {expected} bytes, found {found}")]
    TruncatedData {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("value {value} mV at lead {lead}, sample {sample} overflows int16 at gain {gain}")]
    Range {
        value: f64,
        lead: usize,
        sample: usize,
        gain: f64,
    },
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("unsupported resampling ratio {from} Hz -> {to} Hz")]
    UnsupportedRatio { from: f64, to: f64 },
    #[error("cannot stratify: class {class} has {count} records (need at least {needed})")]
    Stratify {
        class: String,
        count: usize,
        needed: usize,
    },
    #[error("pad length {pad} is shorter than series length {len} or odd")]
    Pad { pad: usize, len: usize },
    #[error("hop {hop} exceeds window length {n_fft}")]
    Hop { hop: usize, n_fft: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    Shape {
        op: String,
        expected: String,
        actual: String,
    },
    #[error("non-finite value in {0}")]
    Numeric(String),
    #[error("index {index} out of range 0..{bound}")]
    Index { index: usize, bound: usize },
    #[error("unknown layer name: {0}")]
    Name(String),
    #[error("checkpoint incompatible: {0}")]
    Version(String),
    #[error("checkpoint corrupt: {0}")]
    Checksum(String),
    #[error("diffusion step {step} outside 1..={max}")]
    Step { step: usize, max: usize },
    #[error("invalid state: {0}")]
    State(String),
    #[error("need at least {needed} records per side, got {got}")]
    SampleSize { needed: usize, got: usize },
    #[error("missing data source: {0}")]
    Source(String),
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(op: &str, expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Error::Shape {
            op: op.to_string(),
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }

    /// Whether the error stems from invalid user input rather than a runtime fault.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Source(_)
                | Error::InvalidArgument(_)
                | Error::Name(_)
                | Error::Schema(_)
                | Error::UnsupportedRatio { .. }
                | Error::Stratify { .. }
                | Error::SampleSize { .. }
        )
    }
}

pub(crate) trait IoContext<T> {
    fn io_context(self, context: impl FnOnce() -> String) -> Result<T>;
}

impl<T> IoContext<T> for std::result::Result<T, std::io::Error> {
    fn io_context(self, context: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| Error::Io {
            context: context(),
            source,
        })
    }
}
